"""Task-specific expansion of the classification path.

From the second incremental step on, each new task gets a 1x1 adapter on
every pyramid level (applied before the shared classification tower), one
1x1 adapter shared across levels after the tower, and its own 3x3
classification head. Adapters start as exact identity maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from diode import autodiff as ad
from diode.detector import Detector, DetectorConfig, add_cls_head, conv, init_base_params, tower
from diode.errors import ConfigurationError, UsageError
from diode.params import tag_matches

FROZEN, NORMAL, EWC = "frozen", "normal", "ewc-regularized"

EXPAND_FROM = 2
FEATURE_EXTRACTOR = ("backbone", "fpn", "cls_tower")
REGRESSION_PATH = ("reg_tower", "reg_head", "ctr_head")


def identity_adapter(channels: int) -> tuple[np.ndarray, np.ndarray]:
    return np.eye(channels).reshape(channels, channels, 1, 1), np.zeros(channels)


def has_adapters(model: Detector, task: int) -> bool:
    return f"dm_ch.{task}.weight" in model.store


def expand_model(
    model: Detector, task_idx: int, class_ids: Sequence[int], expand_from: int | None = EXPAND_FROM
) -> list[str]:
    """Add the head (and, from ``expand_from`` on, the adapters) for a new task.

    ``expand_from=None`` never adds adapters. Returns the names of the new
    parameters; existing parameters are left untouched.
    """
    if task_idx < 1:
        raise UsageError("expansion starts at the first incremental step (task 1)")
    if not class_ids:
        raise UsageError("a task must introduce at least one class")
    if task_idx in model.task_classes:
        raise UsageError(f"task {task_idx} already expanded")
    overlap = set(class_ids) & set(model.seen_classes)
    if overlap:
        raise ConfigurationError(f"classes {sorted(overlap)} already belong to earlier tasks")
    before = set(model.store.names())
    rng = np.random.default_rng([model.seed, task_idx])
    add_cls_head(model.store, model.config, task_idx, len(class_ids), rng)
    if expand_from is not None and task_idx >= expand_from:
        c = model.config.channels
        for level in range(model.config.levels):
            w, b = identity_adapter(c)
            model.store.add(f"dm_fpn.{task_idx}.{level}.weight", w)
            model.store.add(f"dm_fpn.{task_idx}.{level}.bias", b)
        w, b = identity_adapter(c)
        model.store.add(f"dm_ch.{task_idx}.weight", w)
        model.store.add(f"dm_ch.{task_idx}.bias", b)
    model.task_classes[task_idx] = tuple(class_ids)
    return [n for n in model.store.names() if n not in before]


def task_branch_forward(model: Detector, feats: list, task: int, cache: dict | None = None) -> list:
    """Classification logits of one task head on every pyramid level.

    Tasks without adapters share the plain tower evaluation (memoised in
    ``cache``); adapted tasks re-run the tower on their own adapted features.
    """
    store, depth = model.store, model.config.tower_depth
    head = f"cls_head.{task}"
    if has_adapters(model, task):
        out = []
        for level, f in enumerate(feats):
            x = conv(store, f"dm_fpn.{task}.{level}", f)
            x = tower(store, "cls_tower", depth, x)
            x = conv(store, f"dm_ch.{task}", x)
            out.append(conv(store, head, x))
        return out
    if model.dilatable and task >= EXPAND_FROM:
        raise ConfigurationError(f"dilatable model is missing adapters for task {task}")
    cache = {} if cache is None else cache
    if "plain" not in cache:
        cache["plain"] = [tower(store, "cls_tower", depth, f) for f in feats]
    return [conv(store, head, x) for x in cache["plain"]]


# ---------------------------------------------------------------------------
# parameter accounting


def head_params(channels: int, k: int) -> int:
    return 9 * channels * k + k


def adapter_params(channels: int, levels: int) -> int:
    return (levels + 1) * (channels * channels + channels)


def base_param_count(config: DetectorConfig, num_base_classes: int) -> int:
    return init_base_params(config, num_base_classes, seed=0).num_params()


def count_added_params(
    channels: int,
    levels: int,
    classes_per_step: Sequence[int],
    base_params: int,
    expand_from: int = EXPAND_FROM,
) -> list[dict]:
    """Closed-form growth per step; entry 0 is the normally trained base task.

    Returns ``[{"step", "added", "cumulative", "cumulative_ratio"}, ...]``.
    """
    if any(k < 1 for k in classes_per_step):
        raise ConfigurationError("every step must add at least one class")
    rows, total = [], 0
    for step, k in enumerate(classes_per_step):
        added = 0
        if step >= 1:
            added += head_params(channels, k)
        if step >= max(expand_from, 1):
            added += adapter_params(channels, levels)
        total += added
        rows.append(
            {"step": step, "added": added, "cumulative": total, "cumulative_ratio": total / base_params}
        )
    return rows


def count_added_params_for(config: DetectorConfig, classes_per_step: Sequence[int], expand_from=EXPAND_FROM):
    base = base_param_count(config, classes_per_step[0])
    return count_added_params(config.channels, config.levels, classes_per_step, base, expand_from)


# ---------------------------------------------------------------------------
# trainability


@dataclass(frozen=True)
class TrainabilityPolicy:
    step: int
    modes: dict

    def mode_of(self, name: str) -> str:
        # the most specific matching tag wins
        best, best_len = NORMAL, -1
        for tag, mode in self.modes.items():
            if tag_matches(name, [tag]) and len(tag) > best_len:
                best, best_len = mode, len(tag)
        return best

    def tags(self, mode: str) -> list[str]:
        return [t for t, m in self.modes.items() if m == mode]

    @property
    def frozen_tags(self) -> list[str]:
        return self.tags(FROZEN)


def build_trainability_policy(step: int, task_count: int) -> TrainabilityPolicy:
    """Group modes while training incremental ``step`` (1-based) of ``task_count``."""
    if not 1 <= step <= task_count:
        raise UsageError(f"step {step} outside 1..{task_count}")
    modes = {tag: EWC for tag in FEATURE_EXTRACTOR}
    modes.update({tag: NORMAL for tag in REGRESSION_PATH})
    for t in range(step):
        modes[f"cls_head.{t}"] = FROZEN
        if t >= EXPAND_FROM:
            modes[f"dm_fpn.{t}"] = FROZEN
            modes[f"dm_ch.{t}"] = FROZEN
    modes[f"cls_head.{step}"] = NORMAL
    modes[f"dm_fpn.{step}"] = NORMAL
    modes[f"dm_ch.{step}"] = NORMAL
    return TrainabilityPolicy(step, modes)
