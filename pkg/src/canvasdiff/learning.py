"""Parameter bookkeeping shared by every trainable component.

Parameters live in named groups, each tagged with a learning-rate multiplier
(1.0 for heads, the backbone activity ratio for encoder trunks). Reverse-mode
differentiation is delegated to torch.autograd behind a small functional
surface; AdamW and checkpoint I/O are implemented here so their semantics are
pinned by this package's tests rather than by a framework version.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch


class CheckpointError(RuntimeError):
    """Checkpoint directory is missing pieces or inconsistent with its manifest."""


def set_deterministic(enabled: bool = True) -> None:
    """Deterministic math mode: reductions run in a fixed order, so repeated
    runs with the same seeds and thread configuration are bit-identical."""
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        # pin the current thread count so reduction partitioning stays fixed
        torch.set_num_threads(torch.get_num_threads())


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


@dataclass
class ParamGroup:
    name: str
    lr_mult: float
    params: dict[str, torch.Tensor] = field(default_factory=dict)


class ParamStore:
    """Named groups of float32 parameters with per-group lr multipliers.

    Names are unique within a group and a tensor belongs to exactly one group;
    shapes are fixed once registered (loads copy data in place).
    """

    def __init__(self):
        self.groups: dict[str, ParamGroup] = {}
        self._owned: set[int] = set()

    def add_group(self, name: str, lr_mult: float = 1.0) -> ParamGroup:
        if name in self.groups:
            raise ValueError(f"group {name!r} already exists")
        group = ParamGroup(name, lr_mult)
        self.groups[name] = group
        return group

    def add_param(self, group: str, name: str, tensor: torch.Tensor) -> torch.Tensor:
        g = self.groups[group]
        if name in g.params:
            raise ValueError(f"parameter {group}/{name} already registered")
        if id(tensor) in self._owned:
            raise ValueError(f"tensor for {group}/{name} already belongs to another group")
        g.params[name] = tensor
        self._owned.add(id(tensor))
        return tensor

    def adopt_module(self, group: str, module: torch.nn.Module, lr_mult: float = 1.0) -> None:
        """Register every parameter of a torch module under one group."""
        if group not in self.groups:
            self.add_group(group, lr_mult)
        for name, p in module.named_parameters():
            self.add_param(group, name, p)

    def named_params(self) -> list[tuple[str, str, torch.Tensor]]:
        out = []
        for gname, group in self.groups.items():
            for pname, p in group.params.items():
                out.append((gname, pname, p))
        return out

    def tensors(self) -> list[torch.Tensor]:
        return [p for _, _, p in self.named_params()]

    def subset(self, group_names) -> "ParamStore":
        """View over a subset of groups; tensors are shared, not copied."""
        sub = ParamStore()
        for name in group_names:
            group = self.groups[name]
            g = sub.add_group(name, group.lr_mult)
            g.params = group.params  # shared mapping; subset is a view
        return sub

    def clone_values(self) -> dict[tuple[str, str], torch.Tensor]:
        return {(g, n): p.detach().clone() for g, n, p in self.named_params()}

    def load_values(self, values: dict[tuple[str, str], torch.Tensor]) -> None:
        with torch.no_grad():
            for g, n, p in self.named_params():
                if (g, n) in values:
                    p.copy_(values[(g, n)])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for g, n, p in sorted(self.named_params(), key=lambda x: (x[0], x[1])):
            h.update(g.encode())
            h.update(n.encode())
            h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()


def backward(loss: torch.Tensor, store: ParamStore) -> dict[tuple[str, str], torch.Tensor]:
    """Gradients of a scalar loss for every parameter in the store.

    Parameters the loss does not reach get zero gradients. stop_gradient
    markers (detach) are honored by construction.
    """
    named = store.named_params()
    tensors = [p for _, _, p in named]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {}
    for (g, n, p), grad in zip(named, grads):
        out[(g, n)] = torch.zeros_like(p) if grad is None else grad
    return out


# ---------------------------------------------------------------------------
# AdamW

@dataclass
class AdamWState:
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[tuple[str, str], torch.Tensor] = field(default_factory=dict)
    v: dict[tuple[str, str], torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParamStore, lr: float = 1e-4, weight_decay: float = 0.01,
                  beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamWState":
        state = cls(lr=lr, weight_decay=weight_decay, beta1=beta1, beta2=beta2, eps=eps)
        for g, n, p in store.named_params():
            state.m[(g, n)] = torch.zeros_like(p)
            state.v[(g, n)] = torch.zeros_like(p)
        return state


def adamw_step(store: ParamStore, grads: dict[tuple[str, str], torch.Tensor],
               state: AdamWState) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Weight decay applies at the global rate; the moment update is scaled by the
    group's lr multiplier, so a multiplier-0 group only decays.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for gname, group in store.groups.items():
            for pname, p in group.params.items():
                key = (gname, pname)
                grad = grads[key]
                if grad.shape != p.shape:
                    raise ValueError(f"gradient shape {tuple(grad.shape)} != param shape "
                                     f"{tuple(p.shape)} for {gname}/{pname}")
                m = state.m[key]
                v = state.v[key]
                m.mul_(state.beta1).add_(grad, alpha=1.0 - state.beta1)
                v.mul_(state.beta2).addcmul_(grad, grad, value=1.0 - state.beta2)
                p.mul_(1.0 - state.lr * state.weight_decay)
                denom = (v / bc2).sqrt_().add_(state.eps)
                p.addcdiv_(m / bc1, denom, value=-state.lr * group.lr_mult)


# ---------------------------------------------------------------------------
# checkpoint I/O: manifest.json + one little-endian float32 blob per parameter

def _blob_name(group: str, name: str) -> str:
    return f"{group}__{name}.bin"


def save_checkpoint(store: ParamStore, path) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {"format": 1, "groups": {}}
    for gname, group in store.groups.items():
        entry = {"lr_mult": group.lr_mult, "params": {}}
        for pname, p in group.params.items():
            blob = p.detach().cpu().numpy().astype("<f4").tobytes()
            fname = _blob_name(gname, pname)
            with open(os.path.join(path, fname), "wb") as f:
                f.write(blob)
            entry["params"][pname] = {"shape": list(p.shape), "file": fname}
        manifest["groups"][gname] = entry
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_checkpoint(path) -> ParamStore:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no manifest.json in {path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    store = ParamStore()
    for gname, entry in manifest["groups"].items():
        store.add_group(gname, entry["lr_mult"])
        for pname, meta in entry["params"].items():
            shape = tuple(meta["shape"])
            blob_path = os.path.join(path, meta["file"])
            if not os.path.exists(blob_path):
                raise CheckpointError(f"missing blob {meta['file']}")
            with open(blob_path, "rb") as f:
                raw = f.read()
            expected = int(np.prod(shape)) * 4 if shape else 4
            if len(raw) != expected:
                raise CheckpointError(
                    f"blob {meta['file']} holds {len(raw)} bytes, manifest says {expected}"
                )
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            store.add_param(gname, pname, torch.from_numpy(arr))
    return store


def load_into(store: ParamStore, loaded: ParamStore, strict: bool = False) -> list[str]:
    """Copy matching parameters from a loaded checkpoint into a live store.

    Returns the names of live parameters the checkpoint did not cover (these
    keep their fresh initialization). Shape mismatches always raise.
    """
    missing = []
    with torch.no_grad():
        for gname, pname, p in store.named_params():
            src_group = loaded.groups.get(gname)
            src = src_group.params.get(pname) if src_group else None
            if src is None:
                missing.append(f"{gname}/{pname}")
                continue
            if src.shape != p.shape:
                raise CheckpointError(
                    f"shape mismatch for {gname}/{pname}: {tuple(src.shape)} vs {tuple(p.shape)}"
                )
            p.copy_(src)
    if strict and missing:
        raise CheckpointError(f"checkpoint missing parameters: {missing[:5]}...")
    return missing


def checkpoint_hash(path) -> str:
    """Stable content hash of a checkpoint directory."""
    h = hashlib.sha256()
    with open(os.path.join(path, "manifest.json"), "rb") as f:
        manifest_raw = f.read()
    h.update(manifest_raw)
    manifest = json.loads(manifest_raw)
    for gname in sorted(manifest["groups"]):
        entry = manifest["groups"][gname]
        for pname in sorted(entry["params"]):
            with open(os.path.join(path, entry["params"][pname]["file"]), "rb") as f:
                h.update(f.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# initialization helpers

def trunk_init_(module: torch.nn.Module, std: float = 0.02, generator=None) -> None:
    """Scaled-normal init for transformer trunks; biases and norms untouched."""
    with torch.no_grad():
        for _, p in module.named_parameters():
            if p.dim() >= 2:
                p.normal_(0.0, std, generator=generator)
