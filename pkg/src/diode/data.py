"""Procedural shape scenes and multi-step class-incremental protocols.

Geometry lives on the integer pixel grid and images are quantised to 8 bits,
so a (spec, seed) pair reproduces the same corpus on any platform.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from diode.detector import BBox
from diode.errors import ConfigurationError, GenerationError

SHAPES = ("circle", "cross", "square", "triangle")
FILLS = ("hollow", "solid")
VOCABULARY = tuple(sorted(f"{s}-{f}" for s in SHAPES for f in FILLS))

MAX_ATTEMPTS = 1000
RESTART_AFTER = 50
OLD_OBJECT_PROB = 0.5
FUTURE_OBJECT_PROB = 0.5


@dataclass(frozen=True)
class SceneSpec:
    classes: tuple[str, ...] = VOCABULARY
    image_size: int = 64
    objects: tuple[int, int] = (1, 4)
    # side length as a fraction of the image, inclusive
    size_range: tuple[float, float] = (0.3, 0.45)
    # largest pairwise IoU allowed between two objects
    occlusion: float = 0.0
    noise: float = 0.03
    outline: int = 3
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("classes", "objects", "size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @property
    def side_bounds(self) -> tuple[int, int]:
        lo = int(round(self.size_range[0] * self.image_size))
        hi = int(round(self.size_range[1] * self.image_size))
        return max(lo, 2), max(hi, 2)


def shape_mask(name: str, w: int, h: int, outline: int = 3) -> np.ndarray:
    """Boolean [h, w] mask touching all four sides of its box."""
    shape, fill = name.split("-")
    y, x = np.mgrid[0:h, 0:w]
    dx = 2 * x + 1 - w
    dy = 2 * y + 1 - h
    if shape == "square":
        m = np.ones((h, w), dtype=bool)
    elif shape == "circle":
        m = dx * dx * h * h + dy * dy * w * w <= w * w * h * h
    elif shape == "triangle":
        m = np.abs(dx) * h <= w * (y + 1)
    elif shape == "cross":
        m = (3 * np.abs(dx) <= w) | (3 * np.abs(dy) <= h)
    else:
        raise ConfigurationError(f"unknown shape {shape!r}")
    if fill == "hollow":
        inner = ndimage.binary_erosion(m, iterations=outline, border_value=0)
        m = m & ~inner
    elif fill != "solid":
        raise ConfigurationError(f"unknown fill {fill!r}")
    return m


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def render_objects(spec: SceneSpec, class_ids: Sequence[int], rng: np.random.Generator):
    """Place and paint one object per class id; returns (uint8 image, boxes)."""
    size = spec.image_size
    lo, hi = spec.side_bounds
    placed: list[tuple[int, int, int, int]] = []
    attempts = stuck = 0
    while len(placed) < len(class_ids):
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise GenerationError(f"could not place {len(class_ids)} objects in {MAX_ATTEMPTS} attempts")
        if stuck >= RESTART_AFTER:
            placed, stuck = [], 0
        w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        if w > size or h > size:
            raise GenerationError("object larger than image")
        x1 = int(rng.integers(0, size - w + 1))
        y1 = int(rng.integers(0, size - h + 1))
        box = (x1, y1, x1 + w, y1 + h)
        if all(_box_iou(box, other) <= spec.occlusion for other in placed):
            placed.append(box)
            stuck = 0
        else:
            stuck += 1
    background = 24
    img = np.full((size, size), float(background))
    boxes = []
    for cid, (x1, y1, x2, y2) in zip(class_ids, placed):
        mask = shape_mask(spec.classes[cid], x2 - x1, y2 - y1, spec.outline)
        level = int(rng.integers(150, 256))
        region = img[y1:y2, x1:x2]
        region[mask] = level
        ys, xs = np.nonzero(mask)
        boxes.append(BBox(x1 + int(xs.min()), y1 + int(ys.min()), x1 + int(xs.max()) + 1, y1 + int(ys.max()) + 1, int(cid)))
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise * 255.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), boxes


def scene_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def render_scene(spec: SceneSpec, index: int = 0, rng: np.random.Generator | None = None):
    """Random scene over the whole vocabulary; deterministic in (spec, index)."""
    rng = scene_rng(spec.seed, 0, index) if rng is None else rng
    n = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    cids = [int(c) for c in rng.integers(0, len(spec.classes), size=n)]
    return render_objects(spec, cids, rng)


def to_float(images: np.ndarray) -> np.ndarray:
    """uint8 [N, H, W] -> float64 [N, 1, H, W] in [0, 1]."""
    return images.astype(np.float64)[:, None] / 255.0


def mask_annotations(annotations: Sequence[BBox], current_classes) -> list[BBox]:
    keep = set(current_classes)
    return [b for b in annotations if b.class_id in keep]


@dataclass
class DatasetSplit:
    """Images with the annotations a learner may see.

    ``withheld`` holds complete annotations for evaluation and oracles only;
    training code reads ``annotations``.
    """

    role: str
    images: np.ndarray  # uint8 [N, H, W]
    annotations: list[list[BBox]]
    withheld: list[list[BBox]] = field(repr=False, default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def float_images(self) -> np.ndarray:
        return to_float(self.images)

    def examples(self):
        imgs = self.float_images()
        return [(imgs[i], self.annotations[i]) for i in range(len(self))]


@dataclass
class TaskProtocol:
    classes: tuple[str, ...]
    step_sizes: tuple[int, ...]
    train_sizes: tuple[int, ...]
    test_size: int
    seed: int
    train: list[DatasetSplit] = field(default_factory=list, repr=False)
    test: DatasetSplit | None = field(default=None, repr=False)

    @property
    def step_classes(self) -> list[tuple[int, ...]]:
        out, start = [], 0
        for k in self.step_sizes:
            out.append(tuple(range(start, start + k)))
            start += k
        return out

    def seen_classes(self, step: int) -> tuple[int, ...]:
        return tuple(c for cs in self.step_classes[: step + 1] for c in cs)


def build_protocol(
    spec: SceneSpec,
    step_sizes: Sequence[int],
    train_size: int | Sequence[int] = 400,
    test_size: int = 200,
    seed: int | None = None,
) -> TaskProtocol:
    """Materialise per-step training splits (new classes only annotated) and a full test split."""
    step_sizes = tuple(int(k) for k in step_sizes)
    if any(k < 1 for k in step_sizes) or sum(step_sizes) != len(spec.classes):
        raise ConfigurationError(f"step sizes {step_sizes} do not partition {len(spec.classes)} classes")
    if spec.objects[0] < 1 or spec.objects[1] < spec.objects[0]:
        raise ConfigurationError("objects range must be 1 <= lo <= hi")
    sizes = (train_size,) * len(step_sizes) if isinstance(train_size, int) else tuple(train_size)
    if len(sizes) != len(step_sizes):
        raise ConfigurationError("need one training size per step")
    seed = spec.seed if seed is None else seed
    proto = TaskProtocol(spec.classes, step_sizes, sizes, test_size, seed)
    lo, hi = spec.objects
    all_ids = tuple(range(len(spec.classes)))
    for step, current in enumerate(proto.step_classes):
        old = proto.seen_classes(step - 1) if step else ()
        future = tuple(c for c in all_ids if c not in old and c not in current)
        images, full = [], []
        for i in range(sizes[step]):
            rng = scene_rng(seed, 1, step, i)
            n = int(rng.integers(lo, hi + 1))
            with_old = bool(old) and rng.random() < OLD_OBJECT_PROB
            with_future = bool(future) and rng.random() < FUTURE_OBJECT_PROB
            # unannotated distractors only when the image has room for them
            slots = min(hi, max(n, 1 + with_old + with_future)) - 1
            extras = [old] * with_old + [future] * with_future
            extras = extras[:slots]
            pools = [current] * (slots - len(extras)) + extras
            # round-robin primary class keeps the per-class counts balanced
            cids = [current[i % len(current)]] + [int(rng.choice(pool)) for pool in pools]
            img, boxes = render_objects(spec, cids, rng)
            images.append(img)
            full.append(boxes)
        proto.train.append(
            DatasetSplit(
                f"train-step-{step}",
                np.stack(images),
                [mask_annotations(b, current) for b in full],
                full,
            )
        )
    images, full = [], []
    n_cls = len(spec.classes)
    for i in range(test_size):
        rng = scene_rng(seed, 2, i)
        n = int(rng.integers(lo, hi + 1))
        cids = [i % n_cls] + [int(c) for c in rng.integers(0, n_cls, size=n - 1)]
        img, boxes = render_objects(spec, cids, rng)
        images.append(img)
        full.append(boxes)
    proto.test = DatasetSplit("test", np.stack(images), full, full)
    return proto


# ---------------------------------------------------------------------------
# on-disk layout


def _box_records(boxes: Sequence[BBox], extra: dict | None = None) -> list[dict]:
    recs = []
    for b in boxes:
        d = b.to_dict()
        if extra:
            d.update(extra)
        recs.append(d)
    return recs


def save_split(split: DatasetSplit, root, with_withheld: bool = True) -> Path:
    from PIL import Image

    root = Path(root)
    img_dir = root / split.role
    img_dir.mkdir(parents=True, exist_ok=True)
    entries, full_entries = [], []
    for i, img in enumerate(split.images):
        fname = f"{split.role}/{i:05d}.png"
        Image.fromarray(img, mode="L").save(root / fname)
        entries.append({"image": fname, "boxes": _box_records(split.annotations[i])})
        if split.withheld:
            full_entries.append({"image": fname, "boxes": _box_records(split.withheld[i])})
    path = root / f"{split.role}.json"
    path.write_text(json.dumps(entries, indent=1))
    if with_withheld and split.withheld:
        hidden = root / "withheld"
        hidden.mkdir(exist_ok=True)
        (hidden / f"{split.role}.json").write_text(json.dumps(full_entries, indent=1))
    return path


def load_split(root, role: str) -> DatasetSplit:
    from PIL import Image

    root = Path(root)
    entries = json.loads((root / f"{role}.json").read_text())
    images = np.stack([np.asarray(Image.open(root / e["image"])) for e in entries])
    ann = [[BBox.from_dict(b) for b in e["boxes"]] for e in entries]
    hidden = root / "withheld" / f"{role}.json"
    full = []
    if hidden.exists():
        full = [[BBox.from_dict(b) for b in e["boxes"]] for e in json.loads(hidden.read_text())]
    return DatasetSplit(role, images, ann, full)


def save_protocol(proto: TaskProtocol, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split in proto.train:
        save_split(split, root)
    save_split(proto.test, root)
    meta = {k: v for k, v in asdict(proto).items() if k not in ("train", "test")}
    (root / "protocol.json").write_text(json.dumps(meta, indent=1))


def load_protocol(root) -> TaskProtocol:
    root = Path(root)
    meta = json.loads((root / "protocol.json").read_text())
    proto = TaskProtocol(
        tuple(meta["classes"]), tuple(meta["step_sizes"]), tuple(meta["train_sizes"]), meta["test_size"], meta["seed"]
    )
    proto.train = [load_split(root, f"train-step-{s}") for s in range(len(proto.step_sizes))]
    proto.test = load_split(root, "test")
    return proto
