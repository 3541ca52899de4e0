"""Assembled generation model: encoders + fusion + denoiser + schedule, with
checkpoint I/O and the per-turn encode -> fuse -> sample pipeline."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import diffusion, icm, learning
from .denoiser import ConditionalUNet, ConditioningContext
from .diffusion import GuidanceConfig, build_schedule
from .encoders import ImageEncoder, TextEncoder, Tokenizer
from .fusion import GatedFusion
from .icm import MatchingTemperature
from .learning import ParamStore
from .world import WorldConfig


@dataclass(frozen=True)
class ModelConfig:
    world: WorldConfig = WorldConfig()
    d: int = 64
    trunk_width: int = 64
    vision_depth: int = 2
    text_depth: int = 2
    heads: int = 4
    patch: int = 4
    max_len: int = 16
    unet_widths: tuple = (64, 128, 256)
    unet_res_blocks: int = 2
    attn_resolutions: tuple = (8, 4)
    time_dim: int = 256
    T: int = 1000
    eta: float = 1.0
    guidance: GuidanceConfig = GuidanceConfig()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["world"] = WorldConfig(**d["world"])
        d["guidance"] = GuidanceConfig(**d["guidance"])
        d["unet_widths"] = tuple(d["unet_widths"])
        d["attn_resolutions"] = tuple(d["attn_resolutions"])
        return cls(**d)


# store groups holding encoder trunks; these carry the activity-ratio multiplier
TRUNK_GROUPS = ("image_trunk", "text_trunk", "noisy_trunk")


class CanvasModel:
    """Owns all trainable components and the parameter store binding them."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        torch.manual_seed(seed)
        w = config.world
        self.tokenizer = Tokenizer()
        self.image_encoder = ImageEncoder(w.resolution, config.patch, config.trunk_width,
                                          config.vision_depth, config.heads, config.d)
        self.noisy_encoder = ImageEncoder(w.resolution, config.patch, config.trunk_width,
                                          config.vision_depth, config.heads, config.d)
        self.text_encoder = TextEncoder(len(self.tokenizer), config.max_len, config.trunk_width,
                                        config.text_depth, config.heads, config.d,
                                        self.tokenizer.pad_id)
        self.fusion = GatedFusion(config.d)
        self.denoiser = ConditionalUNet(w.resolution, config.unet_widths, config.unet_res_blocks,
                                        config.attn_resolutions, config.heads, config.time_dim,
                                        config.d, config.trunk_width)
        self.icm_temp = MatchingTemperature()
        self.nicm_temp = MatchingTemperature()
        for enc in (self.image_encoder, self.noisy_encoder):
            learning.trunk_init_(enc.trunk)
        learning.trunk_init_(self.text_encoder.trunk)

        self.store = ParamStore()
        self.store.adopt_module("image_trunk", self.image_encoder.trunk, lr_mult=config.eta)
        self.store.adopt_module("image_proj", self.image_encoder.proj)
        self.store.adopt_module("text_trunk", self.text_encoder.trunk, lr_mult=config.eta)
        self.store.adopt_module("text_proj", self.text_encoder.proj)
        self.store.adopt_module("noisy_trunk", self.noisy_encoder.trunk, lr_mult=config.eta)
        self.store.adopt_module("noisy_proj", self.noisy_encoder.proj)
        self.store.adopt_module("fusion", self.fusion)
        self.store.adopt_module("denoiser", self.denoiser)
        self.store.adopt_module("icm", self.icm_temp)
        self.store.adopt_module("nicm", self.nicm_temp)

        self.schedule = build_schedule(config.T)
        self.stages_done: set[int] = set()

    # -- encoding ----------------------------------------------------------

    def prepare_texts(self, texts: list[str]) -> tuple[torch.Tensor, list[bool]]:
        return self.tokenizer.prepare(texts, self.config.max_len)

    def encode_turn(self, ref: torch.Tensor, ids: torch.Tensor) -> ConditioningContext:
        u = self.image_encoder(ref)
        v = self.text_encoder(ids)
        c = self.fusion(u.joint, v.joint)
        return ConditioningContext(c=c, ref_img=ref, patch_reps=u.sequence, token_reps=v.sequence)

    # -- sampling ----------------------------------------------------------

    def guidance_available(self) -> bool:
        return 3 in self.stages_done

    def generate(self, ref: np.ndarray | torch.Tensor, text: str,
                 guidance: GuidanceConfig | None = None, seed: int = 0) -> np.ndarray:
        """Generate one target image for a (reference image, instruction) pair."""
        guidance = guidance or self.config.guidance
        ref_t = torch.as_tensor(np.asarray(ref), dtype=torch.float32).unsqueeze(0)
        ids, _ = self.prepare_texts([text])
        with torch.no_grad():
            ctx = self.encode_turn(ref_t, ids)
            x0 = self._sample_with_ctx(ctx, guidance, seed)
        return x0.squeeze(0).numpy()

    def generate_batch(self, refs: torch.Tensor, texts: list[str],
                       guidance: GuidanceConfig | None = None, seed: int = 0) -> torch.Tensor:
        guidance = guidance or self.config.guidance
        ids, _ = self.prepare_texts(texts)
        with torch.no_grad():
            ctx = self.encode_turn(refs, ids)
            return self._sample_with_ctx(ctx, guidance, seed)

    def _sample_with_ctx(self, ctx: ConditioningContext, guidance: GuidanceConfig,
                         seed: int) -> torch.Tensor:
        ctx_uncond = ctx.unconditional()

        def denoise_fn(x, t, conditional):
            out = self.denoiser(x, t, ctx if conditional else ctx_uncond)
            return out.eps, out.rho

        grad_fn = None
        if self.guidance_available():
            def grad_fn(x):
                return icm.guidance_gradient(ctx.c, x, self.noisy_encoder)

        return diffusion.sample(denoise_fn, ctx.ref_img.shape, self.schedule, guidance,
                                rng_seed=seed, guidance_grad_fn=grad_fn)

    def load_external_trunks(self, path) -> list[str]:
        """Load pretrained trunk weights from a checkpoint directory.

        Only the trunk groups are touched; combined with a small activity
        ratio this supports the fine-tune-a-pretrained-backbone regime.
        Returns the trunk parameters the checkpoint did not provide.
        """
        loaded = learning.load_checkpoint(path)
        trunk_store = self.store.subset([g for g in TRUNK_GROUPS if g in loaded.groups])
        if not trunk_store.groups:
            raise learning.CheckpointError(f"no trunk groups in {path}")
        return learning.load_into(trunk_store, loaded)

    # -- persistence -------------------------------------------------------

    def config_fingerprint(self) -> str:
        raw = json.dumps(self.config.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:16]

    def save(self, path) -> None:
        os.makedirs(path, exist_ok=True)
        learning.save_checkpoint(self.store, path)
        with open(os.path.join(path, "config.json"), "w") as f:
            json.dump(self.config.to_dict(), f, indent=1)
        with open(os.path.join(path, "meta.json"), "w") as f:
            json.dump({"stages_done": sorted(self.stages_done)}, f)
        self.tokenizer.save_vocab(os.path.join(path, "vocab.json"))

    @classmethod
    def load(cls, path) -> "CanvasModel":
        with open(os.path.join(path, "config.json")) as f:
            config = ModelConfig.from_dict(json.load(f))
        model = cls(config)
        loaded = learning.load_checkpoint(path)
        learning.load_into(model.store, loaded)
        meta_path = os.path.join(path, "meta.json")
        if os.path.exists(meta_path):
            with open(meta_path) as f:
                model.stages_done = set(json.load(f).get("stages_done", []))
        return model
