"""Deterministic synthetic scene pairs for change captioning.

Scenes are objects placed on a square grid of cells. A pair is a "before"
scene plus the scene obtained by applying one :class:`ChangeOp`. Everything
here is a pure function of its arguments so datasets can be regenerated
byte-for-byte from ``(n_pairs, seed, change_mix)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError

COLORS = ("red", "blue", "green", "yellow", "gray", "brown")
SHAPES = ("cube", "sphere", "cylinder")
SIZES = ("small", "large")
CHANGE_KINDS = ("add", "remove", "move", "recolor", "no_change")

# uint8 so rasterized images survive a PNG round trip unchanged
COLOR_RGB = {
    "red": (200, 30, 30),
    "blue": (30, 60, 200),
    "green": (30, 150, 50),
    "yellow": (230, 200, 30),
    "gray": (128, 128, 128),
    "brown": (125, 75, 25),
}
BACKGROUND_RGB = (235, 235, 225)

NO_CHANGE_CAPTION = "there is no change"


@dataclass(frozen=True)
class ObjectSpec:
    color: str
    shape: str
    size: str
    cell: tuple[int, int]

    def __post_init__(self):
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.size not in SIZES:
            raise ValueError(f"unknown size {self.size!r}")
        object.__setattr__(self, "cell", (int(self.cell[0]), int(self.cell[1])))

    @property
    def phrase(self) -> str:
        return f"{self.size} {self.color} {self.shape}"

    def to_dict(self) -> dict:
        return {"color": self.color, "shape": self.shape, "size": self.size, "cell": list(self.cell)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ObjectSpec":
        return cls(d["color"], d["shape"], d["size"], tuple(d["cell"]))


@dataclass(frozen=True)
class SceneSpec:
    grid_size: int = 5
    objects: tuple[ObjectSpec, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.grid_size < 1:
            raise ValueError("grid_size must be positive")
        if len(self.objects) > self.grid_size**2:
            raise ValueError("more objects than cells")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("two objects share a cell")
        for r, c in cells:
            if not (0 <= r < self.grid_size and 0 <= c < self.grid_size):
                raise ValueError(f"cell {(r, c)} outside a {self.grid_size}x{self.grid_size} grid")

    def free_cells(self) -> list[tuple[int, int]]:
        taken = {o.cell for o in self.objects}
        return [(r, c) for r in range(self.grid_size) for c in range(self.grid_size) if (r, c) not in taken]

    def to_dict(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "objects": [o.to_dict() for o in self.objects],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SceneSpec":
        return cls(d["grid_size"], tuple(ObjectSpec.from_dict(o) for o in d["objects"]), d["seed"])


@dataclass(frozen=True)
class ChangeOp:
    """One edit applied to a scene.

    ``payload`` is the new :class:`ObjectSpec` for ``add``, the destination
    cell for ``move`` and the new color for ``recolor``. For ``add`` the
    optional ``target_index`` is the insertion position (append if None),
    which lets ``remove`` be inverted exactly.
    """

    kind: str
    target_index: int | None = None
    payload: ObjectSpec | tuple[int, int] | str | None = None

    def __post_init__(self):
        if self.kind not in CHANGE_KINDS:
            raise ValueError(f"unknown change kind {self.kind!r}")
        if self.kind in ("remove", "move", "recolor") and self.target_index is None:
            raise ValueError(f"{self.kind} needs a target_index")
        if self.kind == "add" and not isinstance(self.payload, ObjectSpec):
            raise ValueError("add needs an ObjectSpec payload")
        if self.kind == "move":
            if self.payload is None or len(self.payload) != 2:
                raise ValueError("move needs a (row, col) payload")
            object.__setattr__(self, "payload", (int(self.payload[0]), int(self.payload[1])))
        if self.kind == "recolor" and self.payload not in COLORS:
            raise ValueError("recolor needs a color payload")
        if self.kind in ("remove", "no_change") and self.payload is not None:
            raise ValueError(f"{self.kind} takes no payload")

    def to_dict(self) -> dict:
        payload = self.payload
        if isinstance(payload, ObjectSpec):
            payload = payload.to_dict()
        elif isinstance(payload, tuple):
            payload = list(payload)
        return {"kind": self.kind, "target_index": self.target_index, "payload": payload}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChangeOp":
        payload = d.get("payload")
        if d["kind"] == "add":
            payload = ObjectSpec.from_dict(payload)
        elif d["kind"] == "move":
            payload = tuple(payload)
        return cls(d["kind"], d.get("target_index"), payload)


@dataclass(frozen=True)
class ScenePair:
    pair_id: str
    before: SceneSpec
    after: SceneSpec
    change: ChangeOp
    gt_captions: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "gt_captions", tuple(self.gt_captions))
        if not self.gt_captions:
            raise ValueError("gt_captions must be non-empty")
        if apply_change(self.before, self.change) != self.after:
            raise ValueError(f"{self.pair_id}: after is not before with the change applied")

    @property
    def is_semantic_change(self) -> bool:
        return self.change.kind != "no_change"

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "before": self.before.to_dict(),
            "after": self.after.to_dict(),
            "change": self.change.to_dict(),
            "gt_captions": list(self.gt_captions),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenePair":
        return cls(
            d["pair_id"],
            SceneSpec.from_dict(d["before"]),
            SceneSpec.from_dict(d["after"]),
            ChangeOp.from_dict(d["change"]),
            tuple(d["gt_captions"]),
        )


def apply_change(scene: SceneSpec, op: ChangeOp) -> SceneSpec:
    objs = list(scene.objects)
    if op.kind == "no_change":
        return scene
    if op.kind == "add":
        idx = len(objs) if op.target_index is None else op.target_index
        objs.insert(idx, op.payload)
    else:
        if not 0 <= op.target_index < len(objs):
            raise IndexError(f"target_index {op.target_index} out of range")
        obj = objs[op.target_index]
        if op.kind == "remove":
            del objs[op.target_index]
        elif op.kind == "move":
            objs[op.target_index] = replace(obj, cell=op.payload)
        else:
            objs[op.target_index] = replace(obj, color=op.payload)
    return replace(scene, objects=tuple(objs))


def inverse_change(scene: SceneSpec, op: ChangeOp) -> ChangeOp:
    """The op that undoes ``op`` once it has been applied to ``scene``."""
    if op.kind == "no_change":
        return op
    if op.kind == "add":
        idx = len(scene.objects) if op.target_index is None else op.target_index
        return ChangeOp("remove", idx)
    obj = scene.objects[op.target_index]
    if op.kind == "remove":
        return ChangeOp("add", op.target_index, obj)
    if op.kind == "move":
        return ChangeOp("move", op.target_index, obj.cell)
    return ChangeOp("recolor", op.target_index, obj.color)


# ---------------------------------------------------------------------------
# text


def region_name(cell: tuple[int, int], grid_size: int) -> str:
    """Coarse 3x3 location phrase, e.g. ``"top left"`` or ``"center"``."""
    def band(i):
        return min(2, 3 * i // grid_size)

    row = ("top", "middle", "bottom")[band(cell[0])]
    col = ("left", "middle", "right")[band(cell[1])]
    if row == "middle" and col == "middle":
        return "center"
    if row == "middle":
        return col
    if col == "middle":
        return row
    return f"{row} {col}"


def render_gt_caption(pair: ScenePair | tuple[SceneSpec, ChangeOp]) -> str:
    if isinstance(pair, ScenePair):
        before, op = pair.before, pair.change
    else:
        before, op = pair
    if op.kind == "no_change":
        return NO_CHANGE_CAPTION
    if op.kind == "add":
        return f"the {op.payload.phrase} has been added"
    obj = before.objects[op.target_index]
    if op.kind == "remove":
        return f"the {obj.phrase} is missing"
    if op.kind == "move":
        src = region_name(obj.cell, before.grid_size)
        dst = region_name(op.payload, before.grid_size)
        return f"the {obj.phrase} moved from the {src} to the {dst}"
    return f"the {obj.phrase} changed to {op.payload}"


def caption_vocabulary() -> list[str]:
    """Every token any caption template can emit, sorted."""
    words = set(COLORS) | set(SHAPES) | set(SIZES)
    words |= set("the has been added is missing moved from to changed there no change".split())
    words |= {"top", "bottom", "middle", "left", "right", "center"}
    return sorted(words)


def _direction(subject: tuple[int, int], other: tuple[int, int]) -> str:
    dr = subject[0] - other[0]
    dc = subject[1] - other[1]
    if abs(dc) >= abs(dr):
        return "to the right of" if dc > 0 else "to the left of"
    return "below" if dr > 0 else "above"


_SIZE_RANK = {"small": 0, "large": 1}


def render_pseudo_rte(scene: SceneSpec) -> list[str]:
    """One compositional sentence per object, standing in for VLM output.

    The neighbor is the nearest other object by Manhattan distance (lowest
    index on ties) and is referred to only by relative size, so the subject's
    own attribute words are the only color/shape/size words in the sentence.
    """
    objs = scene.objects
    if len(objs) == 1:
        return [f"the {objs[0].phrase} is the only object"]
    out = []
    for i, obj in enumerate(objs):
        best_j, best_d = -1, None
        for j, other in enumerate(objs):
            if j == i:
                continue
            d = abs(obj.cell[0] - other.cell[0]) + abs(obj.cell[1] - other.cell[1])
            if best_d is None or d < best_d:
                best_j, best_d = j, d
        other = objs[best_j]
        rank = _SIZE_RANK[other.size] - _SIZE_RANK[obj.size]
        ref = {1: "a larger object", -1: "a smaller object", 0: "an object of the same size"}[rank]
        out.append(f"the {obj.phrase} is {_direction(obj.cell, other.cell)} {ref}")
    return out


# ---------------------------------------------------------------------------
# pixels


def shape_mask(shape: str, size: str, cell: int) -> np.ndarray:
    """Boolean ``(cell, cell)`` footprint of one object inside its grid cell."""
    yy, xx = np.mgrid[0:cell, 0:cell] + 0.5
    dy, dx = yy - cell / 2.0, xx - cell / 2.0
    half = (cell - 2) / 2.0 if size == "large" else (cell - 2) / 4.0
    if shape == "cube":
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if shape == "sphere":
        return dy**2 + dx**2 <= half**2
    # upright cylinder: narrow body, full height
    return (np.abs(dy) <= half) & (np.abs(dx) <= half * 0.5 + 0.5)


def rasterize(scene: SceneSpec, resolution: int = 40) -> np.ndarray:
    """Render ``scene`` to a float32 ``(resolution, resolution, 3)`` image in [0, 1]."""
    if resolution < 8 * scene.grid_size:
        raise ConfigurationError(
            f"resolution {resolution} too small for grid {scene.grid_size} (need >= {8 * scene.grid_size})"
        )
    cell = resolution // scene.grid_size
    img = np.empty((resolution, resolution, 3), dtype=np.uint8)
    img[:] = BACKGROUND_RGB
    for obj in scene.objects:
        r0, c0 = obj.cell[0] * cell, obj.cell[1] * cell
        img[r0 : r0 + cell, c0 : c0 + cell][shape_mask(obj.shape, obj.size, cell)] = COLOR_RGB[obj.color]
    return img.astype(np.float32) / 255.0


def perceive_scene(image: np.ndarray, grid_size: int = 5) -> SceneSpec:
    """Invert :func:`rasterize` for clean toy images (objects in row-major order).

    Used by the offline mock VLM; raises ``ValueError`` on pixels that no
    known object footprint explains.
    """
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.int64)
    cell = arr.shape[0] // grid_size
    bg = np.array(BACKGROUND_RGB)
    palette = {name: np.array(rgb) for name, rgb in COLOR_RGB.items()}
    objs = []
    for r in range(grid_size):
        for c in range(grid_size):
            patch = arr[r * cell : (r + 1) * cell, c * cell : (c + 1) * cell]
            fg = np.any(patch != bg, axis=-1)
            if not fg.any():
                continue
            rgb = patch[fg][0]
            color = min(palette, key=lambda k: int(np.abs(palette[k] - rgb).sum()))
            for shape in SHAPES:
                for size in SIZES:
                    if np.array_equal(shape_mask(shape, size, cell), fg):
                        objs.append(ObjectSpec(color, shape, size, (r, c)))
                        break
                else:
                    continue
                break
            else:
                raise ValueError(f"unrecognised object footprint in cell {(r, c)}")
    return SceneSpec(grid_size, tuple(objs), 0)


def describe_difference(before: SceneSpec, after: SceneSpec) -> str:
    """Caption-style sentence for the single edit turning ``before`` into ``after``."""
    key = lambda o: (o.size, o.color, o.shape)  # noqa: E731
    b = {key(o): o for o in before.objects}
    a = {key(o): o for o in after.objects}
    if b == a:
        return "there are no differences"
    gone, new = set(b) - set(a), set(a) - set(b)
    if gone and new:
        old_obj, new_obj = b[next(iter(gone))], a[next(iter(new))]
        if old_obj.cell == new_obj.cell:
            return f"the {old_obj.phrase} changed to {new_obj.color}"
    if gone:
        return f"the {b[next(iter(gone))].phrase} is missing"
    if new:
        return f"the {a[next(iter(new))].phrase} has been added"
    for k, obj in b.items():
        if a[k].cell != obj.cell:
            src, dst = region_name(obj.cell, before.grid_size), region_name(a[k].cell, after.grid_size)
            return f"the {obj.phrase} moved from the {src} to the {dst}"
    return "there are no differences"


def save_image(img: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# datasets


def uniform_mix() -> dict[str, float]:
    return {k: 1.0 / len(CHANGE_KINDS) for k in CHANGE_KINDS}


def _check_mix(change_mix: Mapping[str, float]) -> tuple[list[str], np.ndarray]:
    kinds = [k for k in CHANGE_KINDS if k in change_mix]
    unknown = set(change_mix) - set(CHANGE_KINDS)
    if unknown:
        raise ConfigurationError(f"unknown change kinds {sorted(unknown)}")
    probs = np.array([float(change_mix[k]) for k in kinds])
    if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"change_mix must be a probability vector, got {dict(change_mix)}")
    return kinds, probs


def _random_object(rng: np.random.Generator, cell, exclude: set) -> ObjectSpec:
    while True:
        obj = ObjectSpec(
            COLORS[rng.integers(len(COLORS))],
            SHAPES[rng.integers(len(SHAPES))],
            SIZES[rng.integers(len(SIZES))],
            cell,
        )
        if (obj.size, obj.color, obj.shape) not in exclude:
            return obj


def random_scene(rng: np.random.Generator, grid_size: int, n_objects: int, seed: int) -> SceneSpec:
    cells = [(r, c) for r in range(grid_size) for c in range(grid_size)]
    order = rng.permutation(len(cells))[:n_objects]
    objs, seen = [], set()
    for k in order:
        obj = _random_object(rng, cells[k], seen)
        seen.add((obj.size, obj.color, obj.shape))
        objs.append(obj)
    return SceneSpec(grid_size, tuple(objs), seed)


def _random_change(rng: np.random.Generator, scene: SceneSpec, kind: str) -> ChangeOp:
    objs = scene.objects
    if kind == "no_change":
        return ChangeOp("no_change")
    if kind == "add":
        free = scene.free_cells()
        cell = free[rng.integers(len(free))]
        return ChangeOp("add", None, _random_object(rng, cell, {(o.size, o.color, o.shape) for o in objs}))
    idx = int(rng.integers(len(objs)))
    obj = objs[idx]
    if kind == "remove":
        return ChangeOp("remove", idx)
    if kind == "recolor":
        taken = {(o.size, o.color, o.shape) for o in objs}
        choices = [c for c in COLORS if c != obj.color and (obj.size, c, obj.shape) not in taken]
        return ChangeOp("recolor", idx, choices[rng.integers(len(choices))])
    # move to a free cell in a different coarse region so the caption changes
    src = region_name(obj.cell, scene.grid_size)
    free = [c for c in scene.free_cells() if region_name(c, scene.grid_size) != src]
    return ChangeOp("move", idx, free[rng.integers(len(free))])


def make_pair(pair_id: str, before: SceneSpec, op: ChangeOp) -> ScenePair:
    after = apply_change(before, op)
    return ScenePair(pair_id, before, after, op, (render_gt_caption((before, op)),))


def generate_dataset(
    n_pairs: int,
    seed: int,
    change_mix: Mapping[str, float] | None = None,
    *,
    grid_size: int = 5,
    min_objects: int = 3,
    max_objects: int = 6,
) -> list[ScenePair]:
    """Generate ``n_pairs`` scene pairs; a pure function of its arguments."""
    if n_pairs < 1:
        raise ConfigurationError("n_pairs must be >= 1")
    if not 2 <= min_objects <= max_objects < grid_size**2:
        raise ConfigurationError("need 2 <= min_objects <= max_objects < grid_size**2")
    kinds, probs = _check_mix(change_mix if change_mix is not None else uniform_mix())
    pairs = []
    for i in range(n_pairs):
        rng = np.random.default_rng([seed, i])
        kind = kinds[rng.choice(len(kinds), p=probs)]
        n_obj = int(rng.integers(min_objects, max_objects + 1))
        scene_seed = int(rng.integers(0, 2**63 - 1))
        before = random_scene(rng, grid_size, n_obj, scene_seed)
        op = _random_change(rng, before, kind)
        pairs.append(make_pair(f"s{seed}-{i:05d}", before, op))
    return pairs


def split_of(pair_id: str, fractions: Sequence[int] = (8, 1, 1)) -> str:
    """Deterministic train/val/test assignment by hash of ``pair_id``."""
    bucket = int.from_bytes(hashlib.sha256(pair_id.encode()).digest()[:8], "big") % sum(fractions)
    if bucket < fractions[0]:
        return "train"
    if bucket < fractions[0] + fractions[1]:
        return "val"
    return "test"


def split_dataset(pairs: Iterable[ScenePair]) -> dict[str, list[ScenePair]]:
    out: dict[str, list[ScenePair]] = {"train": [], "val": [], "test": []}
    for p in pairs:
        out[split_of(p.pair_id)].append(p)
    return out


def dumps_dataset(pairs: Iterable[ScenePair]) -> str:
    return "".join(json.dumps(p.to_dict(), sort_keys=True) + "\n" for p in pairs)


def save_dataset(pairs: Sequence[ScenePair], path: str | Path, image_dir: str | Path | None = None,
                 resolution: int = 40) -> None:
    Path(path).write_text(dumps_dataset(pairs))
    if image_dir is not None:
        image_dir = Path(image_dir)
        image_dir.mkdir(parents=True, exist_ok=True)
        for p in pairs:
            save_image(rasterize(p.before, resolution), image_dir / f"{p.pair_id}_bef.png")
            save_image(rasterize(p.after, resolution), image_dir / f"{p.pair_id}_aft.png")


def load_dataset(path: str | Path) -> list[ScenePair]:
    with open(path) as fh:
        return [ScenePair.from_dict(json.loads(line)) for line in fh if line.strip()]
