"""Miniature anchor-free dense detector.

Every pyramid location predicts one-vs-all class logits (one head per task),
a center-ness logit and its distances (l, t, r, b) to the four box sides.
The classification path runs FPN features through a shared classification
tower and then a per-task head; the regression path is shared by all tasks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from diode import autodiff as ad
from diode.autodiff import Tensor
from diode.errors import ConfigurationError
from diode.params import ParameterStore

CLS_PRIOR_BIAS = -2.0


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    channels: int = 32
    strides: tuple[int, ...] = (8, 16)
    tower_depth: int = 2
    # (lo, hi] intervals on max(l, t, r, b), one per level
    size_ranges: tuple[tuple[float, float], ...] = ((0.0, 20.0), (20.0, math.inf))
    in_channels: int = 1
    stem_channels: int = 16

    def __post_init__(self):
        s = list(self.strides)
        if any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigurationError("strides must be strictly increasing")
        if any(x & (x - 1) or x < 2 for x in s):
            raise ConfigurationError("strides must be powers of two >= 2")
        if len(self.size_ranges) != len(s):
            raise ConfigurationError("need one size range per pyramid level")
        r = self.size_ranges
        if r[0][0] != 0 or r[-1][1] != math.inf:
            raise ConfigurationError("size ranges must cover (0, inf)")
        if any(a[1] != b[0] for a, b in zip(r, r[1:])) or any(lo >= hi for lo, hi in r):
            raise ConfigurationError("size ranges must partition (0, inf)")
        if self.image_size % s[-1]:
            raise ConfigurationError("image size must be a multiple of the coarsest stride")

    @property
    def levels(self) -> int:
        return len(self.strides)

    def level_shape(self, level: int) -> tuple[int, int]:
        n = self.image_size // self.strides[level]
        return n, n

    @property
    def locations(self) -> int:
        return sum(h * w for h, w in map(self.level_shape, range(self.levels)))


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int
    score: float | None = None

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ConfigurationError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_dict(self) -> dict:
        d = {"x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2, "class": self.class_id}
        if self.score is not None:
            d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BBox":
        return cls(d["x1"], d["y1"], d["x2"], d["y2"], int(d["class"]), d.get("score"))


@dataclass
class TargetMap:
    """Per-level training targets for a batch of images.

    Arrays are ``cls[l]: [N, K, H, W]`` (one-vs-all over ``class_order``),
    ``ltrb[l]: [N, H, W, 4]``, ``centerness[l]: [N, H, W]`` and
    ``positive[l]: [N, H, W]``. ltrb and centerness are zero off positives.
    """

    class_order: tuple[int, ...]
    cls: list[np.ndarray]
    ltrb: list[np.ndarray]
    centerness: list[np.ndarray]
    positive: list[np.ndarray]

    @property
    def num_positive(self) -> int:
        return int(sum(p.sum() for p in self.positive))

    @staticmethod
    def stack(maps: Sequence["TargetMap"]) -> "TargetMap":
        first = maps[0]
        levels = range(len(first.cls))
        cat = lambda attr: [np.concatenate([getattr(m, attr)[l] for m in maps]) for l in levels]
        return TargetMap(first.class_order, cat("cls"), cat("ltrb"), cat("centerness"), cat("positive"))


def pixel_centers(config: DetectorConfig, level: int) -> tuple[np.ndarray, np.ndarray]:
    s = config.strides[level]
    h, w = config.level_shape(level)
    return np.arange(w) * s + s // 2, np.arange(h) * s + s // 2


def assign_targets(
    annotations: Sequence[BBox], config: DetectorConfig, class_order: Sequence[int]
) -> TargetMap:
    """FCOS-style assignment for one image (maps have a leading batch dim of 1)."""
    col = {c: i for i, c in enumerate(class_order)}
    # canonical order makes the smallest-area tie-break independent of input order
    boxes = sorted(annotations, key=lambda b: (b.area, b.x1, b.y1, b.x2, b.y2, b.class_id))
    cls_maps, ltrb_maps, ctr_maps, pos_maps = [], [], [], []
    for level in range(config.levels):
        h, w = config.level_shape(level)
        cls = np.zeros((1, len(class_order), h, w))
        ltrb = np.zeros((1, h, w, 4))
        ctr = np.zeros((1, h, w))
        pos = np.zeros((1, h, w), dtype=bool)
        if boxes:
            xs, ys = pixel_centers(config, level)
            coords = np.array([b.coords() for b in boxes], dtype=np.float64)
            px = xs[None, None, :]
            py = ys[None, :, None]
            l = px - coords[:, 0, None, None]
            t = py - coords[:, 1, None, None]
            r = coords[:, 2, None, None] - px
            b = coords[:, 3, None, None] - py
            dist = np.stack(np.broadcast_arrays(l, t, r, b), axis=-1)  # [B, H, W, 4]
            m = dist.max(axis=-1)
            lo, hi = config.size_ranges[level]
            ok = (dist.min(axis=-1) > 0) & (m > lo) & (m <= hi)
            pos[0] = ok.any(axis=0)
            # boxes are pre-sorted by area, so the first valid one is the smallest
            choice = np.argmax(ok, axis=0)
            yy, xx = np.nonzero(pos[0])
            for y, x in zip(yy, xx):
                k = choice[y, x]
                cid = boxes[k].class_id
                if cid not in col:
                    raise ConfigurationError(f"class {cid} not in target class order")
                cls[0, col[cid], y, x] = 1.0
                d = dist[k, y, x]
                ltrb[0, y, x] = d
                ctr[0, y, x] = centerness(d)
        cls_maps.append(cls)
        ltrb_maps.append(ltrb)
        ctr_maps.append(ctr)
        pos_maps.append(pos)
    return TargetMap(tuple(class_order), cls_maps, ltrb_maps, ctr_maps, pos_maps)


def centerness(ltrb) -> float:
    l, t, r, b = ltrb
    return math.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b)))


# ---------------------------------------------------------------------------
# network


def _init_conv(store, rng, name, cin, cout, k, gain=2.0, bias=0.0):
    fan_in = cin * k * k
    store.add(f"{name}.weight", rng.normal(0.0, math.sqrt(gain / fan_in), (cout, cin, k, k)))
    store.add(f"{name}.bias", np.full(cout, bias))


def backbone_layout(config: DetectorConfig) -> list[tuple[str, int, int, int]]:
    """(name, cin, cout, stride) for each stride-2 backbone conv."""
    n_down = int(math.log2(config.strides[-1]))
    layout = []
    cin = config.in_channels
    for i in range(n_down):
        cout = config.stem_channels if i == 0 else config.channels
        layout.append((f"backbone.conv{i + 1}", cin, cout, 2))
        cin = cout
    return layout


def init_base_params(config: DetectorConfig, num_base_classes: int, seed: int) -> ParameterStore:
    """Parameters of the unexpanded model with the task-0 classification head."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, cin, cout, _ in backbone_layout(config):
        _init_conv(store, rng, name, cin, cout, 3)
    c = config.channels
    for level in range(config.levels):
        _init_conv(store, rng, f"fpn.{level}.lateral", c, c, 1, gain=1.0)
        _init_conv(store, rng, f"fpn.{level}.output", c, c, 3, gain=1.0)
    for tower in ("cls_tower", "reg_tower"):
        for i in range(config.tower_depth):
            _init_conv(store, rng, f"{tower}.{i}", c, c, 3)
    _init_conv(store, rng, "ctr_head", c, 1, 3, gain=1.0)
    _init_conv(store, rng, "reg_head", c, 4, 3, gain=1.0)
    add_cls_head(store, config, 0, num_base_classes, rng)
    return store


def add_cls_head(store, config, task: int, num_classes: int, rng) -> None:
    _init_conv(
        store, rng, f"cls_head.{task}", config.channels, num_classes, 3, gain=1.0, bias=CLS_PRIOR_BIAS
    )


def conv(store: ParameterStore, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = store[f"{name}.weight"]
    k = w.shape[-1]
    return ad.conv2d(x, w, store[f"{name}.bias"], stride, k // 2)


def pyramid_features(store: ParameterStore, config: DetectorConfig, images: Tensor) -> list[Tensor]:
    """Backbone plus top-down FPN; returns one feature map per level."""
    x = images
    taps = {}
    for name, _, _, stride in backbone_layout(config):
        x = ad.relu(conv(store, name, x, stride))
        taps[x.shape[-1]] = x
    size = config.image_size
    c_maps = [taps[size // s] for s in config.strides]
    laterals = [conv(store, f"fpn.{i}.lateral", c) for i, c in enumerate(c_maps)]
    merged = [None] * config.levels
    merged[-1] = laterals[-1]
    for i in range(config.levels - 2, -1, -1):
        up = merged[i + 1]
        for _ in range(int(math.log2(config.strides[i + 1] // config.strides[i]))):
            up = ad.upsample2x(up)
        merged[i] = ad.add(laterals[i], up)
    return [conv(store, f"fpn.{i}.output", m) for i, m in enumerate(merged)]


def tower(store: ParameterStore, prefix: str, depth: int, x: Tensor) -> Tensor:
    for i in range(depth):
        x = ad.relu(conv(store, f"{prefix}.{i}", x))
    return x


@dataclass
class RawOutputs:
    """Per-level network outputs for a batch.

    ``cls[task][level]`` holds logits ``[N, k_task, H, W]``; ``ctr[level]``
    the center-ness logits ``[N, 1, H, W]``; ``ltrb[level]`` the strictly
    positive side distances in pixels ``[N, 4, H, W]``.
    """

    tasks: tuple[int, ...]
    task_classes: dict[int, tuple[int, ...]]
    cls: dict[int, list[Tensor]]
    ctr: list[Tensor]
    ltrb: list[Tensor]
    strides: tuple[int, ...] = field(default=())

    @property
    def class_order(self) -> tuple[int, ...]:
        return tuple(c for t in self.tasks for c in self.task_classes[t])

    @property
    def batch_size(self) -> int:
        return self.ctr[0].shape[0]


class Detector:
    """Parameter store plus the class partition of each task head.

    ``dilatable`` marks a model that is expected to carry task-specific
    adapters for every task from index 2 on.
    """

    def __init__(
        self,
        config: DetectorConfig,
        base_classes: Sequence[int],
        seed: int = 0,
        dilatable: bool = False,
        store: ParameterStore | None = None,
    ):
        self.config = config
        self.task_classes: dict[int, tuple[int, ...]] = {0: tuple(base_classes)}
        self.store = store if store is not None else init_base_params(config, len(base_classes), seed)
        self.dilatable = dilatable
        self.seed = seed

    @property
    def tasks(self) -> list[int]:
        return sorted(self.task_classes)

    @property
    def seen_classes(self) -> tuple[int, ...]:
        return tuple(c for t in self.tasks for c in self.task_classes[t])

    def copy(self) -> "Detector":
        other = Detector(self.config, self.task_classes[0], self.seed, self.dilatable, self.store.copy())
        other.task_classes = dict(self.task_classes)
        return other

    def forward(self, images, active_tasks: Sequence[int] | None = None) -> RawOutputs:
        return forward(self, images, active_tasks)


def forward(model: Detector, images, active_tasks: Sequence[int] | None = None) -> RawOutputs:
    from diode.dilation import task_branch_forward

    cfg, store = model.config, model.store
    tasks = tuple(model.tasks if active_tasks is None else active_tasks)
    for t in tasks:
        if t not in model.task_classes:
            raise ConfigurationError(f"no classification head for task {t}")
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim == 3:
        x = Tensor(x.data[:, None])
    feats = pyramid_features(store, cfg, x)
    cache: dict = {}
    cls = {t: task_branch_forward(model, feats, t, cache) for t in tasks}
    reg = [tower(store, "reg_tower", cfg.tower_depth, f) for f in feats]
    ctr = [conv(store, "ctr_head", r) for r in reg]
    ltrb = [
        ad.mul(ad.exp(conv(store, "reg_head", r)), float(s)) for r, s in zip(reg, cfg.strides)
    ]
    return RawOutputs(tasks, dict(model.task_classes), cls, ctr, ltrb, tuple(cfg.strides))


# ---------------------------------------------------------------------------
# loss


def _flat_rows(t: Tensor, width: int) -> Tensor:
    """[N, C, H, W] -> [N*H*W, C] (or [N*H*W] when width == 0)."""
    if width == 0:
        return ad.reshape(t, (-1,))
    return ad.reshape(ad.transpose(t, (0, 2, 3, 1)), (-1, width))


def _entropy(p: np.ndarray) -> np.ndarray:
    q = np.clip(p, 1e-300, 1.0)
    r = np.clip(1.0 - p, 1e-300, 1.0)
    return -(p * np.log(q) + (1.0 - p) * np.log(r))


def detection_loss(
    outputs: RawOutputs, targets: TargetMap, alpha: float = 0.25, gamma: float = 2.0
) -> Tensor:
    """Focal + (1 - IoU) + center-ness loss, each normalised by the positive count.

    The center-ness term is the cross-entropy minus the entropy of the
    soft targets, so it has the BCE gradient but vanishes at a perfect fit.
    """
    if tuple(targets.class_order) != outputs.class_order:
        raise ConfigurationError(
            f"target classes {targets.class_order} != output classes {outputs.class_order}"
        )
    npos = targets.num_positive
    norm = 1.0 / max(npos, 1)
    focal_terms = []
    for level in range(len(outputs.ctr)):
        logits = ad.concat([outputs.cls[t][level] for t in outputs.tasks], axis=1)
        focal_terms.append(ad.tsum(ad.sigmoid_focal_loss(logits, targets.cls[level], alpha, gamma)))
    total = focal_terms[0]
    for term in focal_terms[1:]:
        total = ad.add(total, term)
    loss = ad.mul(total, norm)
    if npos == 0:
        return loss
    pos_idx = np.flatnonzero(np.concatenate([p.reshape(-1) for p in targets.positive]))
    ltrb_rows = ad.concat([_flat_rows(t, 4) for t in outputs.ltrb], axis=0)
    tgt_ltrb = np.concatenate([t.reshape(-1, 4) for t in targets.ltrb])[pos_idx]
    reg = ad.tsum(ad.iou_loss(ad.take_rows(ltrb_rows, pos_idx), tgt_ltrb))
    ctr_rows = ad.concat([_flat_rows(t, 0) for t in outputs.ctr], axis=0)
    tgt_ctr = np.concatenate([c.reshape(-1) for c in targets.centerness])[pos_idx]
    ctr = ad.tsum(ad.bce_with_logits(ad.take_rows(ctr_rows, pos_idx), tgt_ctr))
    ctr = ad.add(ctr, -float(_entropy(tgt_ctr).sum()))
    return ad.add(loss, ad.mul(ad.add(reg, ctr), norm))


# ---------------------------------------------------------------------------
# inference


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between [A,4] and [B,4] corner-format boxes."""
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, keys: np.ndarray, iou: float):
    """Class-wise greedy NMS; returns kept indices ordered by (-score, class, key)."""
    order = np.lexsort((keys, classes, -scores))
    keep: list[int] = []
    kept_by_class: dict[int, list[int]] = {}
    for idx in order:
        c = int(classes[idx])
        prev = kept_by_class.setdefault(c, [])
        if prev:
            ious = box_iou_matrix(boxes[idx : idx + 1], boxes[prev])[0]
            if np.any(ious > iou):
                continue
        prev.append(int(idx))
        keep.append(int(idx))
    return keep


def decode(
    outputs: RawOutputs,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    max_dets: int = 100,
    image_size: int | None = None,
) -> list[list[BBox]]:
    """Turn raw outputs into scored boxes, one list per image."""
    classes = np.array(outputs.class_order, dtype=np.int64)
    results = []
    for n in range(outputs.batch_size):
        all_boxes, all_scores, all_cls, all_keys = [], [], [], []
        offset = 0
        for level, stride in enumerate(outputs.strides):
            logits = np.concatenate([outputs.cls[t][level].data[n] for t in outputs.tasks])
            k, h, w = logits.shape
            ctr = ad._sigmoid(outputs.ctr[level].data[n, 0])
            scores = ad._sigmoid(logits) * ctr[None]
            cand = np.argwhere(scores > score_thresh)
            if len(cand):
                ci, yi, xi = cand.T
                d = outputs.ltrb[level].data[n][:, yi, xi]
                px = xi * stride + stride // 2
                py = yi * stride + stride // 2
                all_boxes.append(np.stack([px - d[0], py - d[1], px + d[2], py + d[3]], axis=1))
                all_scores.append(scores[ci, yi, xi])
                all_cls.append(classes[ci])
                all_keys.append(offset + yi * w + xi)
            offset += h * w
        if not all_boxes:
            results.append([])
            continue
        boxes = np.concatenate(all_boxes)
        if image_size is not None:
            boxes = np.clip(boxes, 0, image_size)
        scores = np.concatenate(all_scores)
        cls = np.concatenate(all_cls)
        keys = np.concatenate(all_keys)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        idx_map = np.flatnonzero(valid)
        keep = nms(boxes[valid], scores[valid], cls[valid], keys[valid], nms_iou)[:max_dets]
        results.append(
            [
                BBox(*map(float, boxes[idx_map[i]]), int(cls[idx_map[i]]), float(scores[idx_map[i]]))
                for i in keep
            ]
        )
    return results


def predict(
    model: Detector,
    images: np.ndarray,
    tasks: Sequence[int] | None = None,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    max_dets: int = 100,
    batch_size: int = 32,
) -> list[list[BBox]]:
    out: list[list[BBox]] = []
    for i in range(0, len(images), batch_size):
        raw = forward(model, Tensor(images[i : i + batch_size]), tasks)
        out.extend(decode(raw, score_thresh, nms_iou, max_dets, model.config.image_size))
    return out


def targets_for(
    model: Detector, annotations: Sequence[Sequence[BBox]], class_order: Sequence[int] | None = None
) -> TargetMap:
    order = model.seen_classes if class_order is None else tuple(class_order)
    return TargetMap.stack([assign_targets(a, model.config, order) for a in annotations])
