"""IoU, average precision and mAP over a test split."""

from __future__ import annotations

import csv
import json
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from diode.detector import BBox

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def match_detections(
    detections: Sequence[tuple[int, BBox]], ground_truth: Sequence[tuple[int, BBox]], iou_thresh: float
) -> tuple[np.ndarray, int]:
    """Greedy matching in score order; returns TP flags (in that order) and #GT.

    Detections are ranked by descending score, ties broken by (image id,
    position in the input). Each detection takes the unmatched ground truth
    of its image with the highest IoU, provided that IoU reaches the threshold.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1].score, detections[i][0], i))
    by_image: dict[int, list[BBox]] = {}
    for img, box in ground_truth:
        by_image.setdefault(img, []).append(box)
    used = {img: [False] * len(v) for img, v in by_image.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        img, det = detections[i]
        best, best_j = -1.0, -1
        for j, gt in enumerate(by_image.get(img, ())):
            if used[img][j]:
                continue
            o = iou(det, gt)
            if o >= iou_thresh and o > best:
                best, best_j = o, j
        if best_j >= 0:
            used[img][best_j] = True
            tp[rank] = True
    return tp, len(ground_truth)


def ap_from_flags(tp: np.ndarray, n_gt: int, interpolation: str = "all") -> float:
    if n_gt == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    if interpolation == "11point":
        return float(np.mean([precision[recall >= r].max() if np.any(recall >= r) else 0.0 for r in np.linspace(0, 1, 11)]))
    if interpolation != "all":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    # exact rational sum: each true positive adds 1/n_gt times the best precision at or after it
    best_num, best_den = 0, 1
    total = Fraction(0)
    for k in range(len(tp), 0, -1):
        num = int(ctp[k - 1])
        if num * best_den > best_num * k:
            best_num, best_den = num, k
        if tp[k - 1]:
            total += Fraction(best_num, best_den)
    return float(total / n_gt)


def average_precision(
    detections: Sequence[tuple[int, BBox]],
    ground_truth: Sequence[tuple[int, BBox]],
    iou_thresh: float = 0.5,
    interpolation: str = "all",
) -> float:
    """Single-class AP; boxes are paired with the id of their image."""
    tp, n_gt = match_detections(detections, ground_truth, iou_thresh)
    return ap_from_flags(tp, n_gt, interpolation)


@dataclass
class EvalResult:
    classes: list[int]
    thresholds: list[float]
    # ap[class][threshold as str]
    ap: dict[int, dict[str, float]]
    map50: float
    map5095: float
    excluded: list[int] = field(default_factory=list)

    def class_ap(self, cid: int, thresh: float = 0.5) -> float:
        return self.ap[cid][f"{thresh:.2f}"]

    def mean_ap(self, classes: Sequence[int], thresh: float = 0.5) -> float:
        vals = [self.class_ap(c, thresh) for c in classes if c in self.ap]
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        d = dict(d)
        d["ap"] = {int(k): v for k, v in d["ap"].items()}
        return cls(**d)


def evaluate_detections(
    detections: Sequence[Sequence[BBox]],
    ground_truth: Sequence[Sequence[BBox]],
    classes: Sequence[int],
    thresholds: Sequence[float] = COCO_THRESHOLDS,
    interpolation: str = "all",
) -> EvalResult:
    ap: dict[int, dict[str, float]] = {}
    excluded = []
    for c in classes:
        gts = [(i, b) for i, boxes in enumerate(ground_truth) for b in boxes if b.class_id == c]
        if not gts:
            excluded.append(c)
            continue
        dets = [(i, b) for i, boxes in enumerate(detections) for b in boxes if b.class_id == c]
        ap[c] = {f"{t:.2f}": average_precision(dets, gts, t, interpolation) for t in thresholds}
    kept = [c for c in classes if c in ap]
    per_thresh = [np.mean([ap[c][f"{t:.2f}"] for c in kept]) for t in thresholds] if kept else [0.0]
    map50 = float(np.mean([ap[c]["0.50"] for c in kept])) if kept and 0.5 in thresholds else float(per_thresh[0])
    return EvalResult(list(classes), list(thresholds), ap, map50, float(np.mean(per_thresh)), excluded)


def evaluate_model(
    model,
    split,
    classes: Sequence[int] | None = None,
    thresholds: Sequence[float] = COCO_THRESHOLDS,
    interpolation: str = "all",
) -> EvalResult:
    from diode.detector import predict

    classes = list(model.seen_classes if classes is None else classes)
    dets = predict(model, split.float_images(), score_thresh=0.05, nms_iou=0.5, max_dets=100)
    return evaluate_detections(dets, split.annotations, classes, thresholds, interpolation)


def write_eval_csv(rows: Sequence[dict], path) -> None:
    """Rows of (step, method, class, threshold, ap)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "method", "class", "threshold", "ap"])
        writer.writeheader()
        writer.writerows(rows)


def eval_rows(result: EvalResult, step: int, method: str) -> list[dict]:
    return [
        {"step": step, "method": method, "class": c, "threshold": t, "ap": v}
        for c, per in result.ap.items()
        for t, v in per.items()
    ]


def write_eval_json(result: EvalResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=1))
