"""Procedural grid world: scenes, turn-by-turn episodes, and deterministic rendering.

A scene is a sparse G x G grid of colored shape glyphs. Episodes grow a scene one
object per turn, each turn carrying a templated natural-language instruction. All
functions here are pure; rendering is bit-reproducible.
"""

from __future__ import annotations

import io
import json
import random
from dataclasses import dataclass

import numpy as np
from PIL import Image

SHAPES = ("sphere", "cube", "cylinder")
COLORS = ("red", "green", "blue")
RELATIONS = ("left-of", "right-of", "above", "below")

# canonical class order; a config's num_classes selects a prefix of this list
ALL_CLASSES = tuple((shape, color) for shape in SHAPES for color in COLORS)

BACKGROUND = -1.0

_COLOR_VALUES = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
}

_REL_TEXT = {
    "left-of": "left of",
    "right-of": "right of",
    "above": "above",
    "below": "below",
}


class InvalidConfigError(ValueError):
    """World configuration violates a structural constraint."""


class AnchorNotFoundError(ValueError):
    """Relative placement names an object class absent from the scene."""


class PlacementInfeasibleError(ValueError):
    """No free cell satisfies the requested placement."""


class InvalidSceneError(ValueError):
    """Scene would violate an invariant (duplicate class or occupied cell)."""


@dataclass(frozen=True)
class WorldConfig:
    grid_size: int = 4
    num_classes: int = 6
    k_max: int = 3
    p_rel: float = 0.7
    resolution: int = 16

    def __post_init__(self):
        if self.grid_size < 2:
            raise InvalidConfigError(f"grid_size must be >= 2, got {self.grid_size}")
        if not 1 <= self.num_classes <= len(ALL_CLASSES):
            raise InvalidConfigError(
                f"num_classes must be in 1..{len(ALL_CLASSES)}, got {self.num_classes}"
            )
        if self.k_max < 1:
            raise InvalidConfigError(f"k_max must be >= 1, got {self.k_max}")
        if self.k_max > self.grid_size**2:
            raise InvalidConfigError(
                f"k_max={self.k_max} exceeds cell count {self.grid_size ** 2}"
            )
        if self.k_max > self.num_classes:
            raise InvalidConfigError(
                f"k_max={self.k_max} exceeds class count {self.num_classes}"
            )
        if self.resolution % self.grid_size != 0:
            raise InvalidConfigError(
                f"resolution {self.resolution} not divisible by grid_size {self.grid_size}"
            )
        if self.resolution // self.grid_size < 4:
            raise InvalidConfigError(
                "cell size below 4px; shape glyphs would be indistinguishable"
            )

    @property
    def classes(self) -> tuple[tuple[str, str], ...]:
        return ALL_CLASSES[: self.num_classes]

    @property
    def cell_px(self) -> int:
        return self.resolution // self.grid_size


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    row: int
    col: int

    @property
    def cls(self) -> tuple[str, str]:
        return (self.shape, self.color)

    @property
    def cell(self) -> tuple[int, int]:
        return (self.row, self.col)


@dataclass(frozen=True)
class Scene:
    grid_size: int
    objects: tuple[ObjectSpec, ...] = ()

    def __post_init__(self):
        cells = set()
        classes = set()
        for obj in self.objects:
            if not (0 <= obj.row < self.grid_size and 0 <= obj.col < self.grid_size):
                raise InvalidSceneError(f"object {obj} outside {self.grid_size}x{self.grid_size} grid")
            if obj.shape not in SHAPES or obj.color not in COLORS:
                raise InvalidSceneError(f"unknown shape/color in {obj}")
            if obj.cell in cells:
                raise InvalidSceneError(f"cell {obj.cell} occupied twice")
            if obj.cls in classes:
                raise InvalidSceneError(f"class {obj.cls} appears twice")
            cells.add(obj.cell)
            classes.add(obj.cls)

    @property
    def classes(self) -> set[tuple[str, str]]:
        return {obj.cls for obj in self.objects}

    @property
    def occupied(self) -> set[tuple[int, int]]:
        return {obj.cell for obj in self.objects}

    def find(self, cls: tuple[str, str]) -> ObjectSpec | None:
        for obj in self.objects:
            if obj.cls == cls:
                return obj
        return None

    def with_object(self, obj: ObjectSpec) -> "Scene":
        return Scene(self.grid_size, self.objects + (obj,))


@dataclass(frozen=True)
class AbsolutePlacement:
    row: int
    col: int


@dataclass(frozen=True)
class RelativePlacement:
    relation: str
    anchor: tuple[str, str]


Placement = AbsolutePlacement | RelativePlacement


@dataclass(frozen=True)
class Instruction:
    obj: tuple[str, str]
    placement: Placement
    text: str


@dataclass(frozen=True)
class Episode:
    initial: Scene
    turns: tuple[tuple[Instruction, Scene], ...]

    @property
    def k(self) -> int:
        return len(self.turns)


def instruction_text(obj: tuple[str, str], placement: Placement) -> str:
    """Realize the fixed template for an add-object instruction."""
    shape, color = obj
    if isinstance(placement, AbsolutePlacement):
        return f"add a {color} {shape} in row {placement.row} column {placement.col}"
    a_shape, a_color = placement.anchor
    return f"add a {color} {shape} {_REL_TEXT[placement.relation]} the {a_color} {a_shape}"


# outward scan order for the off-axis offset: anchor-aligned first, then
# alternating sides at increasing distance
def _outward(limit: int):
    yield 0
    for d in range(1, limit):
        yield -d
        yield d


def resolve_placement(scene: Scene, placement: Placement) -> tuple[int, int]:
    """Resolve a placement to a concrete free cell.

    Relative placements take the nearest free cell in the relation's direction,
    scanning outward from the anchor (deterministic tie-break: same row/col
    first, then alternating smaller/larger offsets).
    """
    g = scene.grid_size
    occupied = scene.occupied
    if isinstance(placement, AbsolutePlacement):
        r, c = placement.row, placement.col
        if not (0 <= r < g and 0 <= c < g):
            raise PlacementInfeasibleError(f"cell ({r}, {c}) outside the grid")
        if (r, c) in occupied:
            raise PlacementInfeasibleError(f"cell ({r}, {c}) is occupied")
        return (r, c)

    anchor = scene.find(placement.anchor)
    if anchor is None:
        raise AnchorNotFoundError(f"no {placement.anchor[1]} {placement.anchor[0]} in scene")
    rel = placement.relation
    if rel in ("left-of", "right-of"):
        step = -1 if rel == "left-of" else 1
        for dist in range(1, g):
            c = anchor.col + step * dist
            if not 0 <= c < g:
                break
            for off in _outward(g):
                r = anchor.row + off
                if 0 <= r < g and (r, c) not in occupied:
                    return (r, c)
    else:
        step = -1 if rel == "above" else 1
        for dist in range(1, g):
            r = anchor.row + step * dist
            if not 0 <= r < g:
                break
            for off in _outward(g):
                c = anchor.col + off
                if 0 <= c < g and (r, c) not in occupied:
                    return (r, c)
    raise PlacementInfeasibleError(f"no free cell {rel} the {placement.anchor[1]} {placement.anchor[0]}")


def apply_instruction(scene: Scene, instr: Instruction) -> Scene:
    """Apply an add-object instruction, returning a new scene."""
    if instr.obj in scene.classes:
        raise InvalidSceneError(f"{instr.obj[1]} {instr.obj[0]} already present")
    row, col = resolve_placement(scene, instr.placement)
    return scene.with_object(ObjectSpec(instr.obj[0], instr.obj[1], row, col))


def generate_episode(rng_seed: int, config: WorldConfig) -> Episode:
    """Generate a random valid episode; identical seeds yield identical episodes."""
    rng = random.Random(rng_seed)
    k = rng.randint(1, config.k_max)
    scene = Scene(config.grid_size)
    turns = []
    for i in range(k):
        remaining = [c for c in config.classes if c not in scene.classes]
        obj = rng.choice(remaining)
        placement = _sample_placement(rng, scene, config, first=(i == 0))
        instr = Instruction(obj, placement, instruction_text(obj, placement))
        scene = apply_instruction(scene, instr)
        turns.append((instr, scene))
    return Episode(Scene(config.grid_size), tuple(turns))


def _sample_placement(rng: random.Random, scene: Scene, config: WorldConfig, first: bool) -> Placement:
    g = config.grid_size
    free = [(r, c) for r in range(g) for c in range(g) if (r, c) not in scene.occupied]
    if not first and scene.objects and rng.random() < config.p_rel:
        # retry a few times; fall back to absolute if the direction is blocked
        for _ in range(8):
            anchor = rng.choice(scene.objects)
            rel = rng.choice(RELATIONS)
            placement = RelativePlacement(rel, anchor.cls)
            try:
                resolve_placement(scene, placement)
            except PlacementInfeasibleError:
                continue
            return placement
    return AbsolutePlacement(*rng.choice(free))


def generate_episodes(n: int, config: WorldConfig, seed: int) -> list[Episode]:
    return [generate_episode(seed + i, config) for i in range(n)]


# ---------------------------------------------------------------------------
# rendering

def _glyph_mask(shape: str, s: int) -> np.ndarray:
    ii, jj = np.mgrid[0:s, 0:s]
    if shape == "cube":
        return np.ones((s, s), dtype=bool)
    if shape == "sphere":
        r = s / 2.0
        return (ii + 0.5 - r) ** 2 + (jj + 0.5 - r) ** 2 <= r**2
    if shape == "cylinder":
        return (jj >= s // 4) & (jj < s - s // 4)
    raise ValueError(f"unknown shape {shape!r}")


def render(scene: Scene, resolution: int) -> np.ndarray:
    """Render a scene to a float32 CHW image in [-1, 1]. Pure and bit-stable."""
    if resolution % scene.grid_size != 0:
        raise InvalidConfigError(
            f"resolution {resolution} not divisible by grid_size {scene.grid_size}"
        )
    s = resolution // scene.grid_size
    img = np.full((3, resolution, resolution), BACKGROUND, dtype=np.float32)
    for obj in scene.objects:
        mask = _glyph_mask(obj.shape, s)
        color = _COLOR_VALUES[obj.color]
        r0, c0 = obj.row * s, obj.col * s
        for ch in range(3):
            block = img[ch, r0 : r0 + s, c0 : c0 + s]
            block[mask] = color[ch]
    return img


def to_png_bytes(img: np.ndarray) -> bytes:
    """Encode a [-1, 1] CHW image as 8-bit PNG (round half away from zero)."""
    v = (np.asarray(img, dtype=np.float64) + 1.0) * 127.5
    u8 = np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)
    pil = Image.fromarray(np.transpose(u8, (1, 2, 0)), mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def from_png_bytes(data: bytes) -> np.ndarray:
    pil = Image.open(io.BytesIO(data)).convert("RGB")
    u8 = np.asarray(pil, dtype=np.float32)
    return np.transpose(u8 / 127.5 - 1.0, (2, 0, 1))


# ---------------------------------------------------------------------------
# relation graph

@dataclass(frozen=True)
class RelGraph:
    nodes: frozenset
    edges: frozenset  # (src_class, relation, dst_class)


def relation_graph(scene: Scene) -> RelGraph:
    """Spatial relation graph; edges are fully determined by cell coordinates."""
    edges = set()
    for a in scene.objects:
        for b in scene.objects:
            if a.cls == b.cls:
                continue
            if a.col < b.col:
                edges.add((a.cls, "left-of", b.cls))
            if a.col > b.col:
                edges.add((a.cls, "right-of", b.cls))
            if a.row < b.row:
                edges.add((a.cls, "above", b.cls))
            if a.row > b.row:
                edges.add((a.cls, "below", b.cls))
    return RelGraph(frozenset(obj.cls for obj in scene.objects), frozenset(edges))


# ---------------------------------------------------------------------------
# JSON serialization

def scene_to_dict(scene: Scene) -> dict:
    return {
        "grid_size": scene.grid_size,
        "objects": [
            {"shape": o.shape, "color": o.color, "row": o.row, "col": o.col}
            for o in scene.objects
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    return Scene(
        d["grid_size"],
        tuple(ObjectSpec(o["shape"], o["color"], o["row"], o["col"]) for o in d["objects"]),
    )


def _placement_to_dict(p: Placement) -> dict:
    if isinstance(p, AbsolutePlacement):
        return {"kind": "absolute", "row": p.row, "col": p.col}
    return {"kind": "relative", "relation": p.relation, "anchor_shape": p.anchor[0], "anchor_color": p.anchor[1]}


def _placement_from_dict(d: dict) -> Placement:
    if d["kind"] == "absolute":
        return AbsolutePlacement(d["row"], d["col"])
    return RelativePlacement(d["relation"], (d["anchor_shape"], d["anchor_color"]))


def episode_to_dict(ep: Episode) -> dict:
    return {
        "grid_size": ep.initial.grid_size,
        "turns": [
            {
                "instruction": {
                    "shape": instr.obj[0],
                    "color": instr.obj[1],
                    "placement": _placement_to_dict(instr.placement),
                    "text": instr.text,
                },
                "target": scene_to_dict(target),
            }
            for instr, target in ep.turns
        ],
    }


def episode_from_dict(d: dict) -> Episode:
    turns = []
    for t in d["turns"]:
        i = t["instruction"]
        instr = Instruction((i["shape"], i["color"]), _placement_from_dict(i["placement"]), i["text"])
        turns.append((instr, scene_from_dict(t["target"])))
    return Episode(Scene(d["grid_size"]), tuple(turns))


def save_episodes(episodes: list[Episode], path) -> None:
    with open(path, "w") as f:
        json.dump([episode_to_dict(ep) for ep in episodes], f)


def load_episodes(path) -> list[Episode]:
    with open(path) as f:
        return [episode_from_dict(d) for d in json.load(f)]
