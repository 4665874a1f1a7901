"""Parameter importance and consolidation penalties.

Importance matrices are plain ``{name: ndarray}`` dicts aligned with a
:class:`~diode.params.ParameterStore`. Parameters created after an estimate
(new heads, adapters) are simply absent, which the penalties read as zero
importance.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from diode import autodiff as ad
from diode.autodiff import Tensor
from diode.detector import BBox, Detector, detection_loss, forward, targets_for
from diode.errors import ConfigurationError
from diode.params import ParameterStore, group_of, tag_matches

Importance = dict[str, np.ndarray]

DEFAULT_IMPORTANCE_SAMPLES = 256
ALL_GROUPS = None


def _per_example_grads(store: ParameterStore, fn: Callable[[object], Tensor], examples: Sequence):
    saved = {n: (t.grad.copy() if t.grad is not None else None) for n, t in store.items()}
    try:
        for ex in examples:
            store.zero_grad()
            ad.backward(fn(ex))
            yield {n: t.grad for n, t in store.items()}
    finally:
        for n, t in store.items():
            t.grad = saved[n]


def fisher_importance(
    store: ParameterStore,
    loss_fn: Callable[[object], Tensor],
    examples: Sequence,
    n_samples: int = DEFAULT_IMPORTANCE_SAMPLES,
) -> Importance:
    """Empirical Fisher: mean over examples of the squared loss gradient."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    used = list(examples)[:n_samples]
    acc = {n: np.zeros_like(t.data) for n, t in store.items()}
    for grads in _per_example_grads(store, loss_fn, used):
        for n, g in grads.items():
            acc[n] += g * g
    return {n: a / len(used) for n, a in acc.items()}


def mas_importance(
    store: ParameterStore,
    output_fn: Callable[[object], Tensor],
    examples: Sequence,
    n_samples: int = DEFAULT_IMPORTANCE_SAMPLES,
) -> Importance:
    """Mean absolute gradient of the squared L2 norm of ``output_fn``."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    used = list(examples)[:n_samples]

    def sq_norm(ex):
        g = output_fn(ex)
        return ad.tsum(ad.square(g))

    acc = {n: np.zeros_like(t.data) for n, t in store.items()}
    for grads in _per_example_grads(store, sq_norm, used):
        for n, g in grads.items():
            acc[n] += np.abs(g)
    return {n: a / len(used) for n, a in acc.items()}


def detector_loss_fn(model: Detector):
    """Per-example detection loss over every head the model has."""

    def fn(example):
        image, boxes = example
        raw = forward(model, Tensor(np.asarray(image)[None]))
        return detection_loss(raw, targets_for(model, [boxes]))

    return fn


def detector_logits_fn(model: Detector):
    """Concatenated pre-sigmoid classification outputs for one image."""

    def fn(example):
        image = example[0] if isinstance(example, tuple) else example
        raw = forward(model, Tensor(np.asarray(image)[None]))
        parts = [ad.reshape(x, (-1,)) for t in raw.tasks for x in raw.cls[t]]
        return ad.concat(parts, axis=0)

    return fn


def detector_fisher(model: Detector, dataset: Sequence[tuple[np.ndarray, list[BBox]]], n_samples=256):
    return fisher_importance(model.store, detector_loss_fn(model), dataset, n_samples)


def detector_mas(model: Detector, dataset: Sequence, n_samples=256):
    return mas_importance(model.store, detector_logits_fn(model), dataset, n_samples)


def accumulate_importance(previous: Mapping[str, np.ndarray], current: Mapping[str, np.ndarray]) -> Importance:
    out = {n: np.array(v, dtype=np.float64) for n, v in previous.items()}
    for n, v in current.items():
        out[n] = out[n] + v if n in out else np.array(v, dtype=np.float64)
    return out


def _aligned(store, snapshot, importance, mask):
    for name, theta in store.items():
        if mask is not ALL_GROUPS and not tag_matches(name, mask):
            continue
        in_snap, in_imp = name in snapshot, name in importance
        if not in_snap and not in_imp:
            continue  # created after the estimate: zero importance
        if in_snap != in_imp:
            raise ConfigurationError(f"{name} present in only one of snapshot/importance")
        anchor, f = np.asarray(snapshot[name]), np.asarray(importance[name])
        if anchor.shape != theta.shape or f.shape != theta.shape:
            raise ConfigurationError(f"{name}: shape mismatch against the store")
        yield name, theta, anchor, f


def ewc_penalty(
    store: ParameterStore,
    snapshot: Mapping[str, np.ndarray],
    importance: Mapping[str, np.ndarray],
    lam: float,
    mask: Iterable[str] | None = ALL_GROUPS,
) -> Tensor:
    """``lam / 2 * sum_i F_i (theta_i - theta*_i)^2`` over the masked groups."""
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative")
    mask = None if mask is None else list(mask)
    if mask is not None:
        known = set(store.groups())
        for tag in mask:
            if not any(g == tag or g.startswith(tag + ".") for g in known):
                raise ConfigurationError(f"mask tag {tag!r} matches no parameter group")
    total = Tensor(0.0)
    for _, theta, anchor, f in _aligned(store, snapshot, importance, mask):
        d = ad.sub(theta, Tensor(anchor))
        total = ad.add(total, ad.tsum(ad.mul(ad.mul(d, d), Tensor(f))))
    return ad.mul(total, 0.5 * lam)


def per_task_ewc_penalty(
    store: ParameterStore,
    anchors: Sequence[tuple[Mapping[str, np.ndarray], Mapping[str, np.ndarray]]],
    lam: float,
    mask: Iterable[str] | None = ALL_GROUPS,
) -> Tensor:
    """Plain EWC: one quadratic per earlier task, each around its own optimum."""
    total = Tensor(0.0)
    for snapshot, importance in anchors:
        total = ad.add(total, ewc_penalty(store, snapshot, importance, lam, mask))
    return total


def huber_clipped_penalty(
    store: ParameterStore,
    snapshot: Mapping[str, np.ndarray],
    importance: Mapping[str, np.ndarray],
    lam: float,
    clip: float,
) -> Tensor:
    """EWC quadratic whose per-parameter slope saturates at ``clip`` (all groups)."""
    if clip <= 0:
        raise ConfigurationError("clip threshold must be positive")
    total = Tensor(0.0)
    for _, theta, anchor, f in _aligned(store, snapshot, importance, ALL_GROUPS):
        total = ad.add(total, ad.tsum(ad.huber_penalty(theta, anchor, f, lam, clip)))
    return total


def importance_stats(importance: Mapping[str, np.ndarray], store: ParameterStore | None = None, top_k: int = 5) -> dict:
    """Order statistics per group and the spread of strictly positive entries."""
    names = [n for n in (store.names() if store is not None else importance) if n in importance]
    by_group: dict[str, list[np.ndarray]] = {}
    for n in names:
        by_group.setdefault(group_of(n), []).append(np.asarray(importance[n]).reshape(-1))
    groups = {}
    for g, parts in by_group.items():
        v = np.concatenate(parts)
        groups[g] = {"min": float(v.min()), "median": float(np.median(v)), "max": float(v.max()), "count": int(v.size)}
    flat = np.concatenate([np.asarray(importance[n]).reshape(-1) for n in names]) if names else np.zeros(0)
    positive = flat[flat > 0]
    ratio = float(positive.max() / positive.min()) if positive.size else None
    peaks = sorted(((float(np.max(importance[n])), n) for n in names), reverse=True)[:top_k]
    return {"groups": groups, "max_min_ratio": ratio, "top": [n for _, n in peaks]}
