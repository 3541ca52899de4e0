import math

import pytest
import torch

from canvasdiff import learning
from canvasdiff.learning import (
    AdamWState,
    CheckpointError,
    ParamStore,
    adamw_step,
    backward,
    load_checkpoint,
    load_into,
    save_checkpoint,
    stop_gradient,
)
from conftest import finite_diff_grad, relative_error


def make_store(**tensors):
    store = ParamStore()
    store.add_group("main", 1.0)
    for name, t in tensors.items():
        store.add_param("main", name, t)
    return store


def test_backward_analytic_quadratic():
    p = torch.randn(5, requires_grad=True)
    store = make_store(p=p)
    loss = (p**2).sum() / 2
    grads = backward(loss, store)
    assert torch.allclose(grads[("main", "p")], p.detach())


def test_backward_unconnected_param_zero_grad():
    p = torch.randn(3, requires_grad=True)
    q = torch.randn(3, requires_grad=True)
    store = make_store(p=p, q=q)
    grads = backward((p**2).sum(), store)
    assert torch.all(grads[("main", "q")] == 0)


def test_stop_gradient_blocks_flow():
    x = torch.randn(4, requires_grad=True)
    y = torch.randn(4, requires_grad=True)
    store = make_store(x=x, y=y)
    loss = (stop_gradient(x) * y).sum()
    grads = backward(loss, store)
    assert torch.all(grads[("main", "x")] == 0)
    assert torch.allclose(grads[("main", "y")], x.detach())


def test_backward_matches_finite_differences():
    torch.manual_seed(1)
    net = torch.nn.Sequential(torch.nn.Linear(4, 8), torch.nn.Tanh(),
                              torch.nn.Linear(8, 1)).double()
    x = torch.randn(6, 4, dtype=torch.float64)
    target = torch.randn(6, 1, dtype=torch.float64)
    store = ParamStore()
    store.adopt_module("net", net)

    def compute_loss():
        return ((net(x) - target) ** 2).mean()

    grads = backward(compute_loss(), store)
    for g, n, p in store.named_params():
        fd = finite_diff_grad(compute_loss, p)
        assert relative_error(grads[(g, n)], fd) <= 1e-4


# ---------------------------------------------------------------------------
# AdamW

def test_adamw_zero_grad_is_pure_decay():
    p = torch.ones(4, requires_grad=True)
    store = make_store(p=p)
    state = AdamWState.for_store(store, lr=1e-4, weight_decay=0.01)
    adamw_step(store, {("main", "p"): torch.zeros(4)}, state)
    assert torch.allclose(p.detach(), torch.full((4,), 1.0 - 1e-6))


def test_adamw_scalar_matches_hand_computation():
    # oracle: plain-python arithmetic for one update
    p0, g = 0.7, 0.3
    lr, wd, b1, b2, eps = 1e-3, 0.01, 0.9, 0.999, 1e-8
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat = m / (1 - b1)
    vhat = v / (1 - b2)
    expected = p0 * (1 - lr * wd) - lr * mhat / (math.sqrt(vhat) + eps)

    p = torch.tensor([p0], dtype=torch.float64, requires_grad=True)
    store = make_store(p=p)
    state = AdamWState.for_store(store, lr=lr, weight_decay=wd, beta1=b1, beta2=b2, eps=eps)
    adamw_step(store, {("main", "p"): torch.tensor([g], dtype=torch.float64)}, state)
    assert abs(p.item() - expected) < 1e-12


def test_adamw_multiplier_zero_group_only_decays():
    store = ParamStore()
    store.add_group("frozen", lr_mult=0.0)
    p = torch.full((3,), 2.0, requires_grad=True)
    store.add_param("frozen", "p", p)
    state = AdamWState.for_store(store, lr=1e-2, weight_decay=0.1)
    adamw_step(store, {("frozen", "p"): torch.ones(3)}, state)
    assert torch.allclose(p.detach(), torch.full((3,), 2.0 * (1 - 1e-2 * 0.1)))


def test_adamw_lr_zero_is_identity():
    p = torch.randn(4, requires_grad=True)
    before = p.detach().clone()
    store = make_store(p=p)
    state = AdamWState.for_store(store, lr=0.0, weight_decay=0.01)
    adamw_step(store, {("main", "p"): torch.randn(4)}, state)
    assert torch.equal(p.detach(), before)


def test_adamw_shape_mismatch_raises():
    p = torch.randn(4, requires_grad=True)
    store = make_store(p=p)
    state = AdamWState.for_store(store)
    with pytest.raises(ValueError):
        adamw_step(store, {("main", "p"): torch.randn(5)}, state)


def test_adamw_trunk_multiplier_scales_update():
    # two identical params, one in a half-rate group: its moment step is halved
    pa = torch.ones(1, dtype=torch.float64, requires_grad=True)
    pb = torch.ones(1, dtype=torch.float64, requires_grad=True)
    store = ParamStore()
    store.add_group("head", 1.0)
    store.add_group("trunk", 0.5)
    store.add_param("head", "p", pa)
    store.add_param("trunk", "p", pb)
    state = AdamWState.for_store(store, lr=1e-3, weight_decay=0.0)
    grads = {("head", "p"): torch.ones(1, dtype=torch.float64),
             ("trunk", "p"): torch.ones(1, dtype=torch.float64)}
    adamw_step(store, grads, state)
    step_a = 1.0 - pa.item()
    step_b = 1.0 - pb.item()
    assert step_b == pytest.approx(step_a / 2, rel=1e-9)


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    store = ParamStore()
    store.add_group("a", 0.25)
    store.add_group("b", 1.0)
    store.add_param("a", "w", torch.randn(3, 4, requires_grad=True))
    store.add_param("a", "bias", torch.randn(4, requires_grad=True))
    store.add_param("b", "scalar", torch.randn((), requires_grad=True))
    save_checkpoint(store, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    assert loaded.groups["a"].lr_mult == 0.25
    for g, n, p in store.named_params():
        assert torch.equal(loaded.groups[g].params[n], p.detach())


def test_checkpoint_truncated_blob_raises(tmp_path):
    store = make_store(p=torch.randn(8, requires_grad=True))
    save_checkpoint(store, tmp_path / "ckpt")
    blob = tmp_path / "ckpt" / "main__p.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_missing_manifest_raises(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_load_into_superset_keeps_fresh_groups(tmp_path):
    small = ParamStore()
    small.add_group("enc", 1.0)
    small.add_param("enc", "w", torch.randn(4, requires_grad=True))
    save_checkpoint(small, tmp_path / "s1")

    big = ParamStore()
    big.add_group("enc", 1.0)
    big.add_group("dec", 1.0)
    w = torch.zeros(4, requires_grad=True)
    fresh = torch.randn(3, requires_grad=True)
    fresh_before = fresh.detach().clone()
    big.add_param("enc", "w", w)
    big.add_param("dec", "w", fresh)

    missing = load_into(big, load_checkpoint(tmp_path / "s1"))
    assert missing == ["dec/w"]
    assert torch.equal(w.detach(), small.groups["enc"].params["w"].detach())
    assert torch.equal(fresh.detach(), fresh_before)


def test_load_into_shape_mismatch_raises(tmp_path):
    src = make_store(p=torch.randn(4, requires_grad=True))
    save_checkpoint(src, tmp_path / "c")
    dst = make_store(p=torch.randn(5, requires_grad=True))
    with pytest.raises(CheckpointError):
        load_into(dst, load_checkpoint(tmp_path / "c"))


def test_subset_shares_tensors():
    store = ParamStore()
    store.add_group("a", 1.0)
    store.add_group("b", 1.0)
    pa = torch.randn(2, requires_grad=True)
    store.add_param("a", "p", pa)
    store.add_param("b", "p", torch.randn(2, requires_grad=True))
    sub = store.subset(["a"])
    assert sub.named_params() == [("a", "p", pa)]


def test_duplicate_registration_rejected():
    store = ParamStore()
    store.add_group("g", 1.0)
    p = torch.randn(2, requires_grad=True)
    store.add_param("g", "p", p)
    with pytest.raises(ValueError):
        store.add_param("g", "p", torch.randn(2))
    store.add_group("h", 1.0)
    with pytest.raises(ValueError):
        store.add_param("h", "other", p)  # one group per tensor
