"""Three-stage training: contrastive alignment pretraining, joint diffusion +
alignment training with condition dropout, then noisy-encoder alignment for
guidance. Validation runs on a fixed period; a worse validation loss restores
the best parameters and halves the learning rate, and the fifth restoration
terminates the stage.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from . import icm, world
from .diffusion import cdd_losses, q_sample
from .learning import AdamWState, adamw_step, backward
from .model import CanvasModel


class StagedOrderError(RuntimeError):
    """A stage was started without its prerequisite checkpoint."""


STAGE_GROUPS = {
    1: ("image_trunk", "image_proj", "text_trunk", "text_proj", "fusion", "icm"),
    2: ("image_trunk", "image_proj", "text_trunk", "text_proj", "fusion", "icm", "denoiser"),
    3: ("noisy_trunk", "noisy_proj", "nicm"),
}


@dataclass
class TrainConfig:
    gamma: float = 1.5
    delta: float = 0.1
    lam: float = 0.2
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    val_period: int = 10
    max_restorations: int = 5
    stage_epochs: dict = field(default_factory=lambda: {1: 30, 2: 60, 3: 15})
    skip_stage1: bool = False  # alignment-ablation configuration
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive, weight decay non-negative")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 (contrastive negatives)")
        if self.val_period < 1:
            raise ValueError("validation period must be at least 1 epoch")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "stage_epochs" in d:
            d["stage_epochs"] = {int(k): int(v) for k, v in d["stage_epochs"].items()}
        return cls(**d)


# ---------------------------------------------------------------------------
# turn disassembly

@dataclass
class TurnDataset:
    refs: torch.Tensor     # (N, 3, R, R) teacher-forced references
    ids: torch.Tensor      # (N, L) instruction tokens
    targets: torch.Tensor  # (N, 3, R, R)
    episode_index: list[int]
    turn_index: list[int]

    def __len__(self):
        return self.refs.shape[0]


def disassemble(episodes: list[world.Episode], model: CanvasModel) -> TurnDataset:
    """Split episodes into per-turn triples; each reference is the previous
    ground-truth target (teacher forcing)."""
    resolution = model.config.world.resolution
    refs, texts, targets, ep_idx, turn_idx = [], [], [], [], []
    for e, ep in enumerate(episodes):
        prev = ep.initial
        for i, (instr, target) in enumerate(ep.turns):
            refs.append(world.render(prev, resolution))
            texts.append(instr.text)
            targets.append(world.render(target, resolution))
            ep_idx.append(e)
            turn_idx.append(i)
            prev = target
    ids, _ = model.prepare_texts(texts)
    return TurnDataset(
        refs=torch.from_numpy(np.stack(refs)),
        ids=ids,
        targets=torch.from_numpy(np.stack(targets)),
        episode_index=ep_idx,
        turn_index=turn_idx,
    )


def iterate_batches(dataset: TurnDataset, n: int, generator: torch.Generator):
    """One shuffled pass over all turn triples; batches of fewer than two
    elements are skipped (the contrastive loss needs negatives)."""
    order = torch.randperm(len(dataset), generator=generator)
    for start in range(0, len(order), n):
        idx = order[start : start + n]
        if idx.numel() < 2:
            continue
        yield dataset.refs[idx], dataset.ids[idx], dataset.targets[idx]


def drop_mask(n: int, lam: float, generator: torch.Generator) -> torch.Tensor:
    """Per-element keep mask: 0 drops the condition with probability lam."""
    return (torch.rand(n, generator=generator) >= lam).to(torch.float32)


# ---------------------------------------------------------------------------
# stage objectives

def stage1_loss(model: CanvasModel, refs, ids, targets) -> torch.Tensor:
    u = model.image_encoder(refs).joint
    v = model.text_encoder(ids).joint
    c = model.fusion(u, v)
    z = model.image_encoder(targets).joint
    return icm.infonce(icm.similarity_matrix(c, z), model.icm_temp.log_tau)


def stage2_loss(model: CanvasModel, refs, ids, targets, cfg: TrainConfig,
                generator: torch.Generator):
    b = refs.shape[0]
    ctx = model.encode_turn(refs, ids)
    t = torch.randint(1, model.schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(targets.shape, generator=generator)
    x_t = q_sample(model.schedule, targets, t, eps)
    keep = drop_mask(b, cfg.lam, generator)
    out = model.denoiser(x_t, t, ctx.masked(keep))
    l_mse, l_vlb, l_cdd = cdd_losses(model.schedule, targets, x_t, t, eps, out.eps,
                                     out.rho, cfg.gamma)
    z = model.image_encoder(targets).joint
    l_icm = icm.infonce(icm.similarity_matrix(ctx.c, z), model.icm_temp.log_tau)
    total = l_cdd + cfg.delta * l_icm
    return total, {"mse": l_mse.item(), "vlb": l_vlb.item(), "icm": l_icm.item()}


def stage3_loss(model: CanvasModel, refs, ids, targets, generator: torch.Generator) -> torch.Tensor:
    with torch.no_grad():
        c = model.encode_turn(refs, ids).c
    b = refs.shape[0]
    t = torch.randint(1, model.schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(targets.shape, generator=generator)
    z_t = q_sample(model.schedule, targets, t, eps)
    emb = model.noisy_encoder(z_t).joint
    return icm.n_icm_loss(c, emb, model.nicm_temp.log_tau)


def _batch_loss(model, stage, cfg, refs, ids, targets, generator):
    if stage == 1:
        return stage1_loss(model, refs, ids, targets), {}
    if stage == 2:
        return stage2_loss(model, refs, ids, targets, cfg, generator)
    return stage3_loss(model, refs, ids, targets, generator), {}


# ---------------------------------------------------------------------------
# validation-driven restoration

class RestorationScheduler:
    """Tracks the best validation loss; on regression, halves the learning rate
    and counts a restoration, stopping after the configured limit."""

    def __init__(self, lr: float, max_restorations: int = 5):
        self.lr = lr
        self.max_restorations = max_restorations
        self.best = math.inf
        self.restorations = 0
        self.stopped = False

    def observe(self, val_loss: float) -> str:
        if val_loss < self.best:
            self.best = val_loss
            return "improved"
        self.restorations += 1
        self.lr *= 0.5
        if self.restorations >= self.max_restorations:
            self.stopped = True
        return "restored"


class TrainLog:
    def __init__(self, path):
        self.path = path
        if path is not None and not os.path.exists(path):
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(
                    ["stage", "epoch", "train_loss", "val_loss", "lr", "restorations"]
                )

    def append(self, stage, epoch, train_loss, val_loss, lr, restorations):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([stage, epoch, f"{train_loss:.6f}",
                                    "" if val_loss is None else f"{val_loss:.6f}",
                                    f"{lr:.3e}", restorations])


# ---------------------------------------------------------------------------
# stage driver

def validation_loss(model: CanvasModel, stage: int, cfg: TrainConfig,
                    dataset: TurnDataset, seed: int) -> float:
    """Stage objective on the validation split with a fixed noise draw, so
    successive evaluations are comparable."""
    generator = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for refs, ids, targets in iterate_batches(dataset, cfg.batch_size, generator):
        with torch.no_grad():
            if stage == 1:
                loss = stage1_loss(model, refs, ids, targets)
            elif stage == 2:
                loss, _ = stage2_loss(model, refs, ids, targets, cfg, generator)
            else:
                loss = stage3_loss(model, refs, ids, targets, generator)
        total += loss.item() * refs.shape[0]
        count += refs.shape[0]
    return total / max(count, 1)


def run_stage(model: CanvasModel, stage: int, train_ds: TurnDataset, val_ds: TurnDataset,
              cfg: TrainConfig, log: TrainLog | None = None,
              epochs: int | None = None, epoch_callback=None) -> None:
    """Train one stage in place, honoring the validation/restoration protocol."""
    if stage not in STAGE_GROUPS:
        raise ValueError(f"unknown stage {stage}")
    if stage == 2 and 1 not in model.stages_done and not cfg.skip_stage1:
        raise StagedOrderError("stage 2 requires a stage-1 checkpoint "
                               "(set skip_stage1 for the alignment ablation)")
    if stage == 3 and 2 not in model.stages_done:
        raise StagedOrderError("stage 3 requires a stage-2 checkpoint")

    epochs = epochs if epochs is not None else cfg.stage_epochs[stage]
    sub = model.store.subset(STAGE_GROUPS[stage])
    state = AdamWState.for_store(sub, lr=cfg.lr, weight_decay=cfg.weight_decay)
    restorer = RestorationScheduler(cfg.lr, cfg.max_restorations)
    generator = torch.Generator().manual_seed(cfg.seed + stage * 10_000)
    best_values = None
    log = log or TrainLog(None)
    smoothed = []

    for epoch in range(1, epochs + 1):
        epoch_total, epoch_count = 0.0, 0
        for refs, ids, targets in iterate_batches(train_ds, cfg.batch_size, generator):
            loss, _ = _batch_loss(model, stage, cfg, refs, ids, targets, generator)
            grads = backward(loss, sub)
            state.lr = restorer.lr
            adamw_step(sub, grads, state)
            epoch_total += loss.item() * refs.shape[0]
            epoch_count += refs.shape[0]
            smoothed.append(loss.item())
        train_loss = epoch_total / max(epoch_count, 1)

        val_loss = None
        if epoch % cfg.val_period == 0 or epoch == epochs:
            val_loss = validation_loss(model, stage, cfg, val_ds, cfg.seed + 7)
            action = restorer.observe(val_loss)
            if action == "improved":
                best_values = sub.clone_values()
            else:
                if best_values is not None:
                    sub.load_values(best_values)
                # moments refer to discarded parameters; restart them
                state = AdamWState.for_store(sub, lr=restorer.lr,
                                             weight_decay=cfg.weight_decay)
        log.append(stage, epoch, train_loss, val_loss, restorer.lr, restorer.restorations)
        if epoch_callback is not None:
            epoch_callback(epoch, train_loss)
        if restorer.stopped:
            break

    if best_values is not None:
        sub.load_values(best_values)
    if stage == 2:
        _smoke_check_descent(smoothed)
    model.stages_done.add(stage)


def _smoke_check_descent(losses: list[float], window: int = 50, horizon: int = 500) -> None:
    """Soft property: smoothed early training loss should not increase."""
    if len(losses) < 2 * window:
        return
    series = losses[:horizon]
    means = [sum(series[i : i + window]) / window for i in range(0, len(series) - window, window)]
    if any(b > a * 1.05 for a, b in zip(means, means[1:])):
        warnings.warn("smoothed stage-2 training loss increased over the first "
                      f"{horizon} steps", RuntimeWarning)


def train_stages(model: CanvasModel, stages, train_eps, val_eps, cfg: TrainConfig,
                 out_dir=None, log_path=None) -> None:
    """Run the requested stages in order, checkpointing after each."""
    train_ds = disassemble(train_eps, model)
    val_ds = disassemble(val_eps, model)
    log = TrainLog(log_path)
    for stage in stages:
        run_stage(model, stage, train_ds, val_ds, cfg, log)
        if out_dir is not None:
            model.save(os.path.join(out_dir, f"stage{stage}"))
            model.save(os.path.join(out_dir, "latest"))
