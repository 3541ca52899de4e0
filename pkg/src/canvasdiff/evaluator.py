"""Semantic evaluation of generated images: template-based object detection,
presence precision/recall/F1, relational similarity on the last turn, and the
multi-turn rollout harness with its ablation grid."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import world
from .diffusion import GuidanceConfig
from .world import ALL_CLASSES, ObjectSpec, Scene


class EmptyReportError(ValueError):
    """An evaluation was requested over zero episodes."""


# ---------------------------------------------------------------------------
# detection

@dataclass(frozen=True)
class Detection:
    objects: tuple[ObjectSpec, ...]
    scores: tuple[float, ...]  # aligned with objects

    @property
    def classes(self) -> set[tuple[str, str]]:
        return {o.cls for o in self.objects}


def _templates(cell_px: int) -> list[tuple[tuple[str, str] | None, np.ndarray]]:
    out = [(None, np.full((3, cell_px, cell_px), world.BACKGROUND, dtype=np.float32))]
    for shape, color in ALL_CLASSES:
        scene = Scene(1, (ObjectSpec(shape, color, 0, 0),))
        out.append(((shape, color), world.render(scene, cell_px)))
    return out


_TEMPLATE_CACHE: dict[int, list] = {}


def detect(image: np.ndarray, grid_size: int, threshold: float = 0.6) -> Detection:
    """Nearest-prototype match per cell over glyph templates plus an empty
    template; a cell yields an object only when the normalized match score
    (1 - mean squared difference / 4) clears the threshold."""
    image = np.asarray(image, dtype=np.float32)
    resolution = image.shape[-1]
    s = resolution // grid_size
    if s not in _TEMPLATE_CACHE:
        _TEMPLATE_CACHE[s] = _templates(s)
    templates = _TEMPLATE_CACHE[s]
    objects, scores = [], []
    for r in range(grid_size):
        for c in range(grid_size):
            patch = image[:, r * s : (r + 1) * s, c * s : (c + 1) * s]
            best_cls, best_score = None, -1.0
            for cls, tmpl in templates:
                score = 1.0 - float(np.mean((patch - tmpl) ** 2)) / 4.0
                if score > best_score:
                    best_cls, best_score = cls, score
            if best_cls is not None and best_score > threshold:
                objects.append(ObjectSpec(best_cls[0], best_cls[1], r, c))
                scores.append(best_score)
    return Detection(tuple(objects), tuple(scores))


# ---------------------------------------------------------------------------
# metrics

def presence_metrics(o_gen, o_gt) -> tuple[float, float, float]:
    """Precision/recall/F1 over class identities (cells are ignored here).

    Empty-set convention: an empty prediction scores precision 1 against an
    empty ground truth and 0 otherwise; recall symmetrically.
    """
    gen = set(o_gen)
    gt = set(o_gt)
    hit = len(gen & gt)
    precision = (1.0 if not gt else 0.0) if not gen else hit / len(gen)
    recall = (1.0 if not gen else 0.0) if not gt else hit / len(gt)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def _edges(entries: list[tuple[tuple[str, str], int, int]]) -> set:
    edges = set()
    for cls_a, ra, ca in entries:
        for cls_b, rb, cb in entries:
            if cls_a == cls_b:
                continue
            if ca < cb:
                edges.add((cls_a, "left-of", cls_b))
            if ca > cb:
                edges.add((cls_a, "right-of", cls_b))
            if ra < rb:
                edges.add((cls_a, "above", cls_b))
            if ra > rb:
                edges.add((cls_a, "below", cls_b))
    return edges


def rsim(detection: Detection, gt_scene: Scene) -> float:
    """Recall times the fraction of ground-truth relation edges preserved,
    both graphs restricted to the commonly detected classes.

    If the generated image shows a class in several cells, the highest-scoring
    detection represents it. With fewer than two common classes the edge
    ratio is 1 by convention.
    """
    _, recall, _ = presence_metrics(detection.classes, {o.cls for o in gt_scene.objects})
    common = detection.classes & {o.cls for o in gt_scene.objects}
    best: dict[tuple[str, str], tuple[float, ObjectSpec]] = {}
    for obj, score in zip(detection.objects, detection.scores):
        if obj.cls in common and (obj.cls not in best or score > best[obj.cls][0]):
            best[obj.cls] = (score, obj)
    gen_entries = [(o.cls, o.row, o.col) for _, o in best.values()]
    gt_entries = [(o.cls, o.row, o.col) for o in gt_scene.objects if o.cls in common]
    e_gen = _edges(gen_entries)
    e_gt = _edges(gt_entries)
    ratio = 1.0 if not e_gt else len(e_gen & e_gt) / len(e_gt)
    return recall * ratio


# ---------------------------------------------------------------------------
# rollouts

@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    rsim: float
    n_episodes: int
    n_turns: int
    iterative: bool
    fingerprint: str = ""

    def to_json(self) -> str:
        return json.dumps({"version": 1, **asdict(self)}, indent=1)


class OracleGenerator:
    """Returns ground-truth target renders; the evaluation upper bound."""

    def __init__(self, episodes: list[world.Episode], resolution: int):
        self.episodes = episodes
        self.resolution = resolution

    def __call__(self, refs, texts, seed, items):
        imgs = [world.render(self.episodes[e].turns[t][1], self.resolution) for e, t in items]
        return torch.from_numpy(np.stack(imgs))


def rollout_eval(model, episodes: list[world.Episode], iterative: bool,
                 guidance: GuidanceConfig | None = None, seed: int = 0,
                 batch_size: int = 32, generate_fn=None, fingerprint: str = "",
                 resolution: int | None = None) -> EvalReport:
    """Roll out every episode turn by turn and aggregate semantics.

    In iterative mode each generated image becomes the next reference;
    otherwise the ground-truth previous target does. Presence metrics pool all
    turns of all episodes; relational similarity averages the last turn only.
    """
    if not episodes:
        raise EmptyReportError("cannot evaluate zero episodes")
    if generate_fn is None:
        guidance = guidance or model.config.guidance

        def generate_fn(refs, texts, gen_seed, items):
            return model.generate_batch(refs, texts, guidance, seed=gen_seed)

    if resolution is None:
        resolution = _resolution_of(model, episodes)
    grid_size = episodes[0].initial.grid_size
    current = [torch.from_numpy(world.render(ep.initial, resolution)) for ep in episodes]
    p_sum = r_sum = f_sum = 0.0
    n_turns = 0
    rsim_sum = 0.0
    max_k = max(ep.k for ep in episodes)
    for turn in range(max_k):
        active = [e for e, ep in enumerate(episodes) if ep.k > turn]
        for start in range(0, len(active), batch_size):
            chunk = active[start : start + batch_size]
            refs = torch.stack([current[e] for e in chunk])
            texts = [episodes[e].turns[turn][0].text for e in chunk]
            items = [(e, turn) for e in chunk]
            batch_seed = seed + turn * 100_003 + start
            images = generate_fn(refs, texts, batch_seed, items)
            for img, e in zip(images, chunk):
                target = episodes[e].turns[turn][1]
                det = detect(img.numpy(), grid_size)
                p, r, f1 = presence_metrics(det.classes, {o.cls for o in target.objects})
                p_sum += p
                r_sum += r
                f_sum += f1
                n_turns += 1
                if turn == episodes[e].k - 1:
                    rsim_sum += rsim(det, target)
                nxt = img if iterative else torch.from_numpy(world.render(target, resolution))
                current[e] = nxt
    return EvalReport(
        precision=p_sum / n_turns,
        recall=r_sum / n_turns,
        f1=f_sum / n_turns,
        rsim=rsim_sum / len(episodes),
        n_episodes=len(episodes),
        n_turns=n_turns,
        iterative=iterative,
        fingerprint=fingerprint,
    )


def _resolution_of(model, episodes) -> int:
    if model is not None:
        return model.config.world.resolution
    # oracle-only runs carry no model; fall back to a multiple of the grid
    return episodes[0].initial.grid_size * 4


# ---------------------------------------------------------------------------
# ablation grid

@dataclass(frozen=True)
class AblationSpec:
    train: dict
    guidance: dict
    eta: float | None
    stages: tuple
    iterative: bool


ABLATIONS = {
    "full": AblationSpec({}, {}, None, (1, 2, 3), True),
    "no_icm": AblationSpec({"delta": 0.0, "skip_stage1": True}, {}, None, (2, 3), True),
    "no_icm_guidance": AblationSpec({}, {"psi": 0.0}, None, (1, 2), True),
    "no_cfg": AblationSpec({"lam": 0.0}, {"phi": 1.0}, None, (1, 2, 3), True),
    "frozen_trunk": AblationSpec({}, {}, 0.0, (1, 2, 3), True),
    "trainable_trunk": AblationSpec({}, {}, 1.0, (1, 2, 3), True),
    "non_iterative": AblationSpec({}, {}, None, (1, 2, 3), False),
}


def ablation_suite(run_fn, names=None) -> dict[str, EvalReport]:
    """Produce a report per ablation row; run_fn(name, spec) trains and
    evaluates one configuration."""
    names = names or list(ABLATIONS)
    return {name: run_fn(name, ABLATIONS[name]) for name in names}
