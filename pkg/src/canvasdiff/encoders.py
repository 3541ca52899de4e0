"""Encoders mapping images and instruction texts into a shared d-dimensional space.

A small vision transformer handles images (reference, target, and — with its
own parameters — noisy targets); a causal transformer handles the closed
instruction language. Each trunk is followed by a linear projection into the
joint space; trunk parameters sit in their own store group so they can carry a
reduced learning-rate multiplier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch
import torch.nn as nn

from .world import COLORS, SHAPES


class TokenizationError(ValueError):
    def __init__(self, token: str):
        super().__init__(f"unknown token {token!r}")
        self.token = token


SPECIALS = ("<pad>", "<bos>", "<eos>")
WORDS = (
    "add", "a", "the", "in", "row", "column", "of",
    "left", "right", "above", "below",
    *COLORS, *SHAPES,
    *(str(i) for i in range(10)),
)


class Tokenizer:
    """Word-level tokenizer over the closed instruction vocabulary."""

    def __init__(self):
        self.vocab = {w: i for i, w in enumerate(SPECIALS + WORDS)}
        self.inverse = {i: w for w, i in self.vocab.items()}
        self.pad_id = self.vocab["<pad>"]
        self.bos_id = self.vocab["<bos>"]
        self.eos_id = self.vocab["<eos>"]

    def __len__(self):
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        ids = [self.bos_id]
        for word in text.split():
            if word not in self.vocab:
                raise TokenizationError(word)
            ids.append(self.vocab[word])
        ids.append(self.eos_id)
        return ids

    def decode(self, ids) -> str:
        specials = {self.pad_id, self.bos_id, self.eos_id}
        return " ".join(self.inverse[int(i)] for i in ids if int(i) not in specials)

    def save_vocab(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"version": 1, "words": self.vocab}, f, indent=1)

    def prepare(self, texts: list[str], max_len: int) -> tuple[torch.Tensor, list[bool]]:
        """Tokenize, pad and truncate a batch; flags mark truncated rows."""
        rows, truncated = [], []
        for text in texts:
            ids = self.encode(text)
            if len(ids) > max_len:
                ids = ids[: max_len - 1] + [self.eos_id]
                truncated.append(True)
            else:
                truncated.append(False)
            rows.append(ids + [self.pad_id] * (max_len - len(ids)))
        return torch.tensor(rows, dtype=torch.long), truncated


@dataclass
class EncoderOutput:
    joint: torch.Tensor      # (B, d)
    sequence: torch.Tensor   # (B, L, trunk_width), pad rows zeroed for text
    truncated: bool = False


class TransformerBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, attn_mask=None, key_padding_mask=None):
        h = self.ln1(x)
        attn_out, _ = self.attn(h, h, h, attn_mask=attn_mask,
                                key_padding_mask=key_padding_mask, need_weights=False)
        x = x + attn_out
        return x + self.mlp(self.ln2(x))


class VisionTrunk(nn.Module):
    """Patchify + transformer; pools through a learned class token."""

    def __init__(self, resolution: int, patch: int, width: int, depth: int, heads: int):
        super().__init__()
        if resolution % patch != 0:
            raise ValueError(f"resolution {resolution} not divisible by patch {patch}")
        self.resolution = resolution
        n_patches = (resolution // patch) ** 2
        self.patch_embed = nn.Conv2d(3, width, kernel_size=patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, width))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, width))
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(depth))
        self.ln_final = nn.LayerNorm(width)

    def forward(self, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if img.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(
                f"expected {self.resolution}x{self.resolution} input, got {tuple(img.shape[-2:])}"
            )
        x = self.patch_embed(img).flatten(2).transpose(1, 2)  # (B, P, w)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.ln_final(x)
        return x[:, 0], x[:, 1:]


class TextTrunk(nn.Module):
    """Causal transformer over token ids; pools at the final non-pad position."""

    def __init__(self, vocab_size: int, max_len: int, width: int, depth: int, heads: int,
                 pad_id: int):
        super().__init__()
        self.max_len = max_len
        self.pad_id = pad_id
        self.token_embed = nn.Embedding(vocab_size, width)
        self.pos_embed = nn.Parameter(torch.zeros(1, max_len, width))
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(depth))
        self.ln_final = nn.LayerNorm(width)

    def forward(self, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if ids.shape[1] > self.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {self.max_len}")
        L = ids.shape[1]
        pad_mask = ids == self.pad_id
        causal = torch.triu(torch.ones(L, L, dtype=torch.bool, device=ids.device), diagonal=1)
        x = self.token_embed(ids) + self.pos_embed[:, :L]
        for block in self.blocks:
            x = block(x, attn_mask=causal, key_padding_mask=pad_mask)
        x = self.ln_final(x)
        x = x * (~pad_mask).unsqueeze(-1).to(x.dtype)  # zero pad rows for downstream use
        last = (~pad_mask).sum(dim=1) - 1
        pooled = x[torch.arange(ids.shape[0], device=ids.device), last]
        return pooled, x


class ImageEncoder(nn.Module):
    def __init__(self, resolution: int, patch: int, width: int, depth: int, heads: int, d: int):
        super().__init__()
        self.trunk = VisionTrunk(resolution, patch, width, depth, heads)
        self.proj = nn.Linear(width, d)

    def forward(self, img: torch.Tensor) -> EncoderOutput:
        pooled, patches = self.trunk(img)
        return EncoderOutput(joint=self.proj(pooled), sequence=patches)


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, max_len: int, width: int, depth: int, heads: int,
                 d: int, pad_id: int):
        super().__init__()
        self.trunk = TextTrunk(vocab_size, max_len, width, depth, heads, pad_id)
        self.proj = nn.Linear(width, d)

    def forward(self, ids: torch.Tensor, truncated: bool = False) -> EncoderOutput:
        pooled, tokens = self.trunk(ids)
        return EncoderOutput(joint=self.proj(pooled), sequence=tokens, truncated=truncated)
