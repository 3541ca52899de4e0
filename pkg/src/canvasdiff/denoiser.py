"""Conditional U-Net predicting per-pixel noise and a variance-interpolation
fraction.

Conditioning enters three ways: the fused condition vector is added to the
time embedding, the reference image is channel-concatenated with the noisy
input, and the reference patch plus instruction token representations extend
every attention layer as additional key/value positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ConditioningContext:
    c: torch.Tensor           # (B, d) fused condition
    ref_img: torch.Tensor     # (B, 3, H, W)
    patch_reps: torch.Tensor  # (B, P, w)
    token_reps: torch.Tensor  # (B, L, w)

    def masked(self, keep: torch.Tensor) -> "ConditioningContext":
        """Zero the condition and attention tokens where keep == 0 (drop path).

        The reference image stays; only the instruction-side conditioning is
        removed for the unconditional branch.
        """
        keep = keep.to(self.c.dtype)
        return ConditioningContext(
            c=self.c * keep[:, None],
            ref_img=self.ref_img,
            patch_reps=self.patch_reps * keep[:, None, None],
            token_reps=self.token_reps * keep[:, None, None],
        )

    def unconditional(self) -> "ConditioningContext":
        return self.masked(torch.zeros(self.c.shape[0], device=self.c.device))


@dataclass
class DenoiserOutput:
    eps: torch.Tensor  # (B, 3, H, W)
    rho: torch.Tensor  # (B, 3, H, W), in [0, 1]


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype, device=t.device) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb_proj(F.silu(emb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Self-attention over spatial positions, extended with context tokens as
    extra key/value entries."""

    def __init__(self, ch: int, heads: int, resolution: int):
        super().__init__()
        self.heads = heads
        self.resolution = resolution
        self.norm = nn.GroupNorm(8, ch)
        self.q = nn.Linear(ch, ch)
        self.k = nn.Linear(ch, ch)
        self.v = nn.Linear(ch, ch)
        self.out = nn.Linear(ch, ch)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, extra_kv=None):
        B, C, H, W = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        kv_src = tokens if extra_kv is None else torch.cat([tokens, extra_kv], dim=1)
        dh = C // self.heads

        def split(t):
            return t.view(B, t.shape[1], self.heads, dh).transpose(1, 2)

        q, k, v = split(self.q(tokens)), split(self.k(kv_src)), split(self.v(kv_src))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        o = (attn @ v).transpose(1, 2).reshape(B, H * W, C)
        return x + self.out(o).transpose(1, 2).reshape(B, C, H, W)


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class CondSequential(nn.Sequential):
    def forward(self, x, emb, ctx_kv):
        for layer in self:
            if isinstance(layer, ResBlock):
                x = layer(x, emb)
            elif isinstance(layer, AttentionBlock):
                x = layer(x, ctx_kv.get(layer.resolution) if ctx_kv else None)
            else:
                x = layer(x)
        return x


class ConditionalUNet(nn.Module):
    def __init__(self, resolution: int = 16, widths=(64, 128, 256), res_blocks: int = 2,
                 attn_resolutions=(8, 4), heads: int = 4, time_dim: int = 256,
                 cond_dim: int = 64, ctx_width: int = 64):
        super().__init__()
        self.resolution = resolution
        self.attn_resolutions = tuple(attn_resolutions)
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(),
                                      nn.Linear(time_dim, time_dim))
        self.cond_proj = nn.Linear(cond_dim, time_dim)

        ch = widths[0]
        self.input_blocks = nn.ModuleList([CondSequential(nn.Conv2d(6, ch, 3, padding=1))])
        input_chs = [ch]
        res = resolution
        attn_channels = {}
        for i, w in enumerate(widths):
            for _ in range(res_blocks):
                layers = [ResBlock(ch, w, time_dim)]
                ch = w
                if res in self.attn_resolutions:
                    layers.append(AttentionBlock(ch, heads, res))
                    attn_channels[res] = ch
                self.input_blocks.append(CondSequential(*layers))
                input_chs.append(ch)
            if i != len(widths) - 1:
                self.input_blocks.append(CondSequential(Downsample(ch)))
                input_chs.append(ch)
                res //= 2

        mid = [ResBlock(ch, ch, time_dim)]
        if res in self.attn_resolutions:
            mid.append(AttentionBlock(ch, heads, res))
            attn_channels[res] = ch
        mid.append(ResBlock(ch, ch, time_dim))
        self.middle_block = CondSequential(*mid)

        self.output_blocks = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            for j in range(res_blocks + 1):
                layers = [ResBlock(ch + input_chs.pop(), w, time_dim)]
                ch = w
                if res in self.attn_resolutions:
                    layers.append(AttentionBlock(ch, heads, res))
                if i and j == res_blocks:
                    layers.append(Upsample(ch))
                    res *= 2
                self.output_blocks.append(CondSequential(*layers))

        # one context projection per attention resolution
        self.ctx_proj = nn.ModuleDict(
            {str(r): nn.Linear(ctx_width, c) for r, c in attn_channels.items()}
        )

        self.out_norm = nn.GroupNorm(8, widths[0])
        self.out_conv = nn.Conv2d(widths[0], 6, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, ctx: ConditioningContext) -> DenoiserOutput:
        if x_t.shape[-2:] != ctx.ref_img.shape[-2:]:
            raise ValueError(f"noisy input {tuple(x_t.shape[-2:])} and reference "
                             f"{tuple(ctx.ref_img.shape[-2:])} resolutions differ")
        dtype = self.out_conv.weight.dtype
        emb = self.time_mlp(timestep_embedding(t, self.time_dim, dtype)) + self.cond_proj(ctx.c)
        tokens = torch.cat([ctx.patch_reps, ctx.token_reps], dim=1)
        ctx_kv = {int(r): proj(tokens) for r, proj in self.ctx_proj.items()}

        h = torch.cat([x_t, ctx.ref_img], dim=1)
        skips = []
        for block in self.input_blocks:
            h = block(h, emb, ctx_kv)
            skips.append(h)
        h = self.middle_block(h, emb, ctx_kv)
        for block in self.output_blocks:
            h = block(torch.cat([h, skips.pop()], dim=1), emb, ctx_kv)
        out = self.out_conv(F.silu(self.out_norm(h)))
        eps, rho_raw = out[:, :3], out[:, 3:]
        rho = ((rho_raw + 1.0) / 2.0).clamp(0.0, 1.0)
        return DenoiserOutput(eps=eps, rho=rho)
