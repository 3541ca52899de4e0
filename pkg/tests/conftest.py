import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _fixed_torch_state():
    torch.manual_seed(0)
    yield


def finite_diff_grad(f, x: torch.Tensor, step: float = 1e-3) -> torch.Tensor:
    """Central finite differences of f() with respect to x, perturbing x in
    place and restoring it. Independent of autograd."""
    grad = torch.zeros_like(x, dtype=torch.float64)
    flat = x.detach().reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(f())
            flat[i] = orig - step
            lo = float(f())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def fd_check_params(loss_fn, params, step: float = 1e-3, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Worst relative error between autograd and finite differences.

    Checks every entry by default; for large tensors a random subset of entries
    per parameter can be sampled.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.detach().reshape(-1)
        gflat = g.reshape(-1)
        idx = range(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.numel(), size=max_entries, replace=False)
        fd = []
        ad = []
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                hi = float(loss_fn())
                flat[i] = orig - step
                lo = float(loss_fn())
                flat[i] = orig
            fd.append((hi - lo) / (2 * step))
            ad.append(float(gflat[i]))
        fd_t = torch.tensor(fd, dtype=torch.float64)
        ad_t = torch.tensor(ad, dtype=torch.float64)
        worst = max(worst, relative_error(ad_t, fd_t))
    return worst
