import random

import numpy as np
import pytest
import torch

from canvasdiff import evaluator, world
from canvasdiff.evaluator import (
    ABLATIONS,
    Detection,
    EmptyReportError,
    OracleGenerator,
    ablation_suite,
    detect,
    presence_metrics,
    rollout_eval,
    rsim,
)
from canvasdiff.world import ALL_CLASSES, ObjectSpec, Scene, WorldConfig, generate_episodes, render

CFG = WorldConfig(grid_size=4, num_classes=6, k_max=3)


def random_scene(rng, n=None, grid=4, classes=ALL_CLASSES):
    n = rng.randint(0, min(6, len(classes))) if n is None else n
    cells = rng.sample([(r, c) for r in range(grid) for c in range(grid)], n)
    chosen = rng.sample(list(classes), n)
    return Scene(grid, tuple(ObjectSpec(s, c, r, cc) for (s, c), (r, cc) in zip(chosen, cells)))


# ---------------------------------------------------------------------------
# detection

def test_detector_roundtrip_exact_on_1000_scenes():
    rng = random.Random(0)
    for _ in range(1000):
        scene = random_scene(rng)
        det = detect(render(scene, 16), 4)
        assert set(det.objects) == set(scene.objects)


def test_detector_empty_background():
    det = detect(render(Scene(4), 16), 4)
    assert det.objects == ()


def test_detector_robust_to_gaussian_noise():
    rng = random.Random(1)
    gen = np.random.default_rng(2)
    total, recovered = 0, 0
    for _ in range(500):
        scene = random_scene(rng, n=rng.randint(1, 5))
        noisy = render(scene, 16) + gen.normal(0, 0.1, size=(3, 16, 16)).astype(np.float32)
        det = detect(noisy, 4)
        total += len(scene.objects)
        recovered += len(set(det.objects) & set(scene.objects))
    assert recovered / total >= 0.99


def test_detector_scores_in_unit_interval():
    rng = random.Random(3)
    scene = random_scene(rng, n=4)
    det = detect(render(scene, 16), 4)
    assert all(0.0 <= s <= 1.0 for s in det.scores)
    assert all(s > 0.99 for s in det.scores)  # clean renders match exactly


# ---------------------------------------------------------------------------
# presence metrics

def brute_force_presence(gen_list, gt_list):
    hits = sum(1 for g in set(gen_list) if g in set(gt_list))
    if len(set(gen_list)) == 0:
        p = 1.0 if len(set(gt_list)) == 0 else 0.0
    else:
        p = hits / len(set(gen_list))
    if len(set(gt_list)) == 0:
        r = 1.0 if len(set(gen_list)) == 0 else 0.0
    else:
        r = hits / len(set(gt_list))
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def test_presence_exact_match():
    s = {("cube", "red"), ("sphere", "blue")}
    assert presence_metrics(s, s) == (1.0, 1.0, 1.0)


def test_presence_half_overlap():
    gen = {("cube", "red"), ("sphere", "blue")}
    gt = {("cube", "red"), ("cylinder", "green")}
    assert presence_metrics(gen, gt) == (0.5, 0.5, 0.5)


def test_presence_empty_conventions():
    assert presence_metrics(set(), {("cube", "red")}) == (0.0, 0.0, 0.0)
    assert presence_metrics({("cube", "red")}, set()) == (0.0, 0.0, 0.0)
    assert presence_metrics(set(), set()) == (1.0, 1.0, 1.0)


def test_presence_matches_set_oracle_10000():
    rng = random.Random(7)
    for _ in range(10_000):
        gen = rng.sample(ALL_CLASSES, rng.randint(0, 6))
        gt = rng.sample(ALL_CLASSES, rng.randint(0, 6))
        assert presence_metrics(gen, gt) == brute_force_presence(gen, gt)


# ---------------------------------------------------------------------------
# relational similarity

def detection_of(scene, scores=None):
    objs = tuple(scene.objects)
    return Detection(objs, tuple(1.0 for _ in objs) if scores is None else scores)


def test_rsim_perfect_generation():
    rng = random.Random(11)
    scene = random_scene(rng, n=4)
    assert rsim(detection_of(scene), scene) == 1.0


def test_rsim_missing_object_keeps_full_edge_ratio():
    gt = Scene(4, (ObjectSpec("cube", "red", 0, 0), ObjectSpec("sphere", "blue", 0, 2),
                   ObjectSpec("cylinder", "green", 2, 1)))
    gen = Scene(4, (ObjectSpec("cube", "red", 0, 0), ObjectSpec("sphere", "blue", 0, 2)))
    # both common objects keep their exact cells: common-subgraph edges all match
    value = rsim(detection_of(gen), gt)
    assert value == pytest.approx(2 / 3)


def test_rsim_swapped_order_zero_edge_ratio():
    gt = Scene(4, (ObjectSpec("cube", "red", 0, 0), ObjectSpec("sphere", "blue", 0, 2)))
    gen = Scene(4, (ObjectSpec("cube", "red", 0, 2), ObjectSpec("sphere", "blue", 0, 0)))
    assert rsim(detection_of(gen), gt) == 0.0


def brute_force_rsim(gen_scene, gt_scene):
    gen_classes = {o.cls for o in gen_scene.objects}
    gt_classes = {o.cls for o in gt_scene.objects}
    common = gen_classes & gt_classes
    recall = (1.0 if not gen_classes else 0.0) if not gt_classes else len(common) / len(gt_classes)

    def edges(scene):
        out = set()
        for a in scene.objects:
            if a.cls not in common:
                continue
            for b in scene.objects:
                if b.cls not in common or a.cls == b.cls:
                    continue
                if a.col < b.col:
                    out.add((a.cls, "left-of", b.cls))
                if a.col > b.col:
                    out.add((a.cls, "right-of", b.cls))
                if a.row < b.row:
                    out.add((a.cls, "above", b.cls))
                if a.row > b.row:
                    out.add((a.cls, "below", b.cls))
        return out

    e_gen, e_gt = edges(gen_scene), edges(gt_scene)
    ratio = 1.0 if not e_gt else len(e_gen & e_gt) / len(e_gt)
    return recall * ratio


def test_rsim_matches_graph_oracle_1000_pairs():
    rng = random.Random(13)
    for _ in range(1000):
        gen_scene = random_scene(rng)
        gt_scene = random_scene(rng)
        assert rsim(detection_of(gen_scene), gt_scene) == brute_force_rsim(gen_scene, gt_scene)


def test_rsim_bounded_by_recall():
    rng = random.Random(17)
    for _ in range(200):
        gen_scene = random_scene(rng)
        gt_scene = random_scene(rng)
        _, recall, _ = presence_metrics({o.cls for o in gen_scene.objects},
                                        {o.cls for o in gt_scene.objects})
        assert rsim(detection_of(gen_scene), gt_scene) <= recall + 1e-12


def test_rsim_duplicate_class_uses_best_scoring_cell():
    gt = Scene(4, (ObjectSpec("cube", "red", 0, 0), ObjectSpec("sphere", "blue", 0, 2)))
    dup = Detection(
        (ObjectSpec("cube", "red", 0, 0), ObjectSpec("cube", "red", 3, 3),
         ObjectSpec("sphere", "blue", 0, 2)),
        (0.9, 0.7, 0.95),
    )
    assert rsim(dup, gt) == 1.0  # the low-scoring stray copy is ignored


# ---------------------------------------------------------------------------
# rollouts

def test_oracle_generator_scores_perfectly_both_modes():
    episodes = generate_episodes(12, CFG, seed=3)
    oracle = OracleGenerator(episodes, resolution=16)
    for iterative in (True, False):
        report = rollout_eval(None, episodes, iterative=iterative, generate_fn=oracle)
        assert report.f1 == 1.0
        assert report.precision == 1.0
        assert report.recall == 1.0
        assert report.rsim == 1.0
        assert report.n_turns == sum(ep.k for ep in episodes)
        assert report.n_episodes == 12


def test_rollout_empty_episodes_rejected():
    with pytest.raises(EmptyReportError):
        rollout_eval(None, [], iterative=True, generate_fn=lambda *a: None)


def test_rollout_reports_are_serializable():
    episodes = generate_episodes(3, CFG, seed=5)
    oracle = OracleGenerator(episodes, resolution=16)
    report = rollout_eval(None, episodes, iterative=True, generate_fn=oracle,
                          fingerprint="abc123")
    import json
    payload = json.loads(report.to_json())
    assert payload["version"] == 1
    assert payload["fingerprint"] == "abc123"
    assert 0.0 <= payload["rsim"] <= 1.0


def test_iterative_mode_feeds_generated_images_forward():
    """A generator that always returns a fixed wrong image: in iterative mode
    the references it receives after turn one must equal that image."""
    episodes = [ep for ep in generate_episodes(40, CFG, seed=9) if ep.k >= 2][:4]
    wrong = torch.from_numpy(render(Scene(4, (ObjectSpec("cube", "red", 3, 3),)), 16))
    seen_refs = []

    def gen_fn(refs, texts, seed, items):
        seen_refs.append((refs.clone(), [t for _, t in items]))
        return wrong.expand(refs.shape[0], -1, -1, -1).clone()

    rollout_eval(None, episodes, iterative=True, generate_fn=gen_fn)
    for refs, turns in seen_refs:
        for row, turn in zip(refs, turns):
            if turn > 0:
                assert torch.equal(row, wrong)


def test_non_iterative_mode_feeds_ground_truth_forward():
    episodes = [ep for ep in generate_episodes(40, CFG, seed=9) if ep.k >= 2][:4]
    wrong = torch.from_numpy(render(Scene(4, (ObjectSpec("cube", "red", 3, 3),)), 16))
    seen = []

    def gen_fn(refs, texts, seed, items):
        seen.append((refs.clone(), list(items)))
        return wrong.expand(refs.shape[0], -1, -1, -1).clone()

    rollout_eval(None, episodes, iterative=False, generate_fn=gen_fn)
    for refs, items in seen:
        for row, (e, turn) in zip(refs, items):
            if turn > 0:
                expected = torch.from_numpy(render(episodes[e].turns[turn - 1][1], 16))
                assert torch.equal(row, expected)


# ---------------------------------------------------------------------------
# ablation grid

def test_ablation_rows_cover_table():
    assert set(ABLATIONS) == {"full", "no_icm", "no_icm_guidance", "no_cfg",
                              "frozen_trunk", "trainable_trunk", "non_iterative"}


def test_ablation_no_cfg_sets_exactly_lambda_and_phi():
    spec = ABLATIONS["no_cfg"]
    assert spec.train == {"lam": 0.0}
    assert spec.guidance == {"phi": 1.0}
    assert spec.stages == (1, 2, 3)
    assert spec.iterative is True


def test_ablation_no_icm_guidance_skips_stage3_and_psi():
    spec = ABLATIONS["no_icm_guidance"]
    assert spec.guidance == {"psi": 0.0}
    assert spec.stages == (1, 2)
    assert spec.train == {}


def test_ablation_no_icm_drops_delta_and_stage1():
    spec = ABLATIONS["no_icm"]
    assert spec.train == {"delta": 0.0, "skip_stage1": True}
    assert spec.stages == (2, 3)


def test_ablation_trunk_rows_set_eta():
    assert ABLATIONS["frozen_trunk"].eta == 0.0
    assert ABLATIONS["trainable_trunk"].eta == 1.0


def test_ablation_full_row_is_identity():
    spec = ABLATIONS["full"]
    assert spec.train == {} and spec.guidance == {} and spec.eta is None
    assert spec.iterative is True


def test_ablation_suite_runs_each_row():
    calls = []

    def run_fn(name, spec):
        calls.append(name)
        return evaluator.EvalReport(1, 1, 1, 1, 1, 1, spec.iterative)

    out = ablation_suite(run_fn, names=["full", "non_iterative"])
    assert calls == ["full", "non_iterative"]
    assert out["non_iterative"].iterative is False
