"""Old-class pseudo annotations from the previous model."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from diode.detector import BBox, Detector, predict
from diode.errors import ProtocolError

DEFAULT_CONF = 0.5


def generate_pseudo(
    old_model: Detector,
    images: np.ndarray,
    conf_thresh: float = DEFAULT_CONF,
    nms_iou: float = 0.5,
    old_tasks: Sequence[int] | None = None,
    max_dets: int = 100,
) -> list[list[BBox]]:
    """Boxes of old classes predicted on ``images`` ([N, 1, H, W] floats).

    Only heads of ``old_tasks`` (default: every head of ``old_model``) are run.
    """
    if not 0.0 < conf_thresh < 1.0:
        raise ValueError("confidence threshold must lie in (0, 1)")
    tasks = old_model.tasks if old_tasks is None else list(old_tasks)
    return predict(old_model, images, tasks, score_thresh=conf_thresh, nms_iou=nms_iou, max_dets=max_dets)


@dataclass
class MergedAnnotationSet:
    image_id: int
    gt_new: list[BBox]
    pseudo_old: list[BBox] = field(default_factory=list)

    @property
    def boxes(self) -> list[BBox]:
        return list(self.gt_new) + list(self.pseudo_old)

    @property
    def sources(self) -> list[str]:
        return ["gt"] * len(self.gt_new) + ["pseudo"] * len(self.pseudo_old)

    def __len__(self) -> int:
        return len(self.gt_new) + len(self.pseudo_old)


def merge_annotations(gt_new: Sequence[BBox], pseudo_old: Sequence[BBox], image_id: int = 0) -> MergedAnnotationSet:
    """Concatenate new ground truth with old-class pseudo boxes.

    The two class sets must be disjoint; overlapping boxes of different
    classes are all kept.
    """
    clash = {b.class_id for b in gt_new} & {b.class_id for b in pseudo_old}
    if clash:
        raise ProtocolError(f"pseudo and ground-truth boxes share classes {sorted(clash)}")
    return MergedAnnotationSet(image_id, list(gt_new), list(pseudo_old))


def save_merged(sets: Sequence[MergedAnnotationSet], image_names: Sequence[str], path) -> None:
    entries = []
    for s, name in zip(sets, image_names):
        boxes = [dict(b.to_dict(), source="gt") for b in s.gt_new]
        boxes += [dict(b.to_dict(), source="pseudo") for b in s.pseudo_old]
        entries.append({"image": name, "boxes": boxes})
    Path(path).write_text(json.dumps(entries, indent=1))


def load_merged(path) -> list[MergedAnnotationSet]:
    out = []
    for i, e in enumerate(json.loads(Path(path).read_text())):
        gt = [BBox.from_dict(b) for b in e["boxes"] if b.get("source", "gt") == "gt"]
        ps = [BBox.from_dict(b) for b in e["boxes"] if b.get("source") == "pseudo"]
        out.append(MergedAnnotationSet(i, gt, ps))
    return out


def pseudo_quality(pseudo: Sequence[Sequence[BBox]], truth: Sequence[Sequence[BBox]], classes, iou_thresh=0.5):
    """(recall, precision) of pseudo boxes against withheld old-class truth."""
    from diode.metrics import iou

    keep = set(classes)
    tp = n_pred = n_true = 0
    for preds, gts in zip(pseudo, truth):
        gts = [g for g in gts if g.class_id in keep]
        preds = [p for p in preds if p.class_id in keep]
        n_true += len(gts)
        n_pred += len(preds)
        used = [False] * len(gts)
        for p in sorted(preds, key=lambda b: -b.score):
            best, bj = iou_thresh, -1
            for j, g in enumerate(gts):
                if not used[j] and g.class_id == p.class_id:
                    o = iou(p, g)
                    if o >= best:
                        best, bj = o, j
            if bj >= 0:
                used[bj] = True
                tp += 1
    recall = tp / n_true if n_true else 1.0
    precision = tp / n_pred if n_pred else 1.0
    return recall, precision
