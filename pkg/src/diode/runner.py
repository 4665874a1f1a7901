"""Multi-step experiments: method matrix, training loop, lambda search, reports.

A run trains step 0 normally, then for every incremental step optionally
pseudo-labels old classes with the previous model, expands the model, trains
with the method's penalty and finally re-estimates importance. Everything is
a function of (config, seed), so identical inputs give identical records.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from diode import autodiff as ad
from diode.autodiff import Tensor
from diode.continual import (
    accumulate_importance,
    detector_fisher,
    detector_mas,
    ewc_penalty,
    huber_clipped_penalty,
    per_task_ewc_penalty,
)
from diode.data import SceneSpec, TaskProtocol, build_protocol, load_protocol
from diode.detector import BBox, Detector, DetectorConfig, TargetMap, assign_targets, detection_loss, forward
from diode.dilation import (
    FEATURE_EXTRACTOR,
    FROZEN,
    TrainabilityPolicy,
    build_trainability_policy,
    count_added_params,
    expand_model,
)
from diode.errors import ConfigurationError, ExplosionError, UsageError
from diode.metrics import EvalResult, evaluate_model
from diode.params import ParameterStore, sgd_step, tag_matches
from diode.pseudo import generate_pseudo, merge_annotations, pseudo_quality

DEFAULT_LAMBDA_GRID = tuple(10.0**k for k in range(9))


@dataclass(frozen=True)
class MethodSpec:
    """How one method composes penalty, mask, pseudo labels and expansion."""

    name: str
    importance: str | None = None  # "fisher" | "mas"
    anchoring: str = "online"  # "online" (accumulated, latest anchor) | "per-task"
    penalty: str = "quadratic"  # "quadratic" | "huber"
    mask: tuple[str, ...] | None = None  # None = all groups
    pseudo: bool = False
    expand: bool = False

    @property
    def regularized(self) -> bool:
        return self.importance is not None


METHODS: dict[str, MethodSpec] = {
    "finetune": MethodSpec("finetune"),
    "finetune+pseudo": MethodSpec("finetune+pseudo", pseudo=True),
    "ewc": MethodSpec("ewc", importance="fisher", anchoring="per-task", pseudo=True),
    "online-ewc": MethodSpec("online-ewc", importance="fisher", pseudo=True),
    "mas": MethodSpec("mas", importance="mas", pseudo=True),
    "incdet-huber": MethodSpec("incdet-huber", importance="fisher", penalty="huber", pseudo=True),
    "constrained-ewc": MethodSpec("constrained-ewc", importance="fisher", mask=FEATURE_EXTRACTOR, pseudo=True),
    "diode": MethodSpec("diode", importance="fisher", mask=FEATURE_EXTRACTOR, pseudo=True, expand=True),
}


def method_flags(name: str) -> dict:
    """Flag dict of a method, convenient for diffing two methods."""
    if name not in METHODS:
        raise ConfigurationError(f"unknown method {name!r}; choose from {sorted(METHODS)}")
    d = asdict(METHODS[name])
    d.pop("name")
    return d


@dataclass
class ExperimentConfig:
    """One method on one protocol; ``seeds`` lists independent repetitions.

    ``lam`` is a number, a per-incremental-step list, or ``"search"`` (critical
    lambda found on the first incremental step and reused afterwards).
    ``pseudo`` and ``expand`` override the method defaults when not None.
    """

    method: str = "finetune"
    step_sizes: tuple[int, ...] = (4, 2, 2)
    scene: dict = field(default_factory=dict)
    train_size: int | tuple[int, ...] = 1000
    test_size: int = 200
    data_seed: int = 0
    data_dir: str | None = None
    detector: dict = field(default_factory=dict)
    lam: float | list | str = 0.0
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    probe_fraction: float = 0.1
    lr: float = 0.1
    momentum: float = 0.0
    lr_decay_at: float = 0.75
    iterations: int = 2000
    scale_iterations: bool = False
    batch_size: int = 8
    seeds: tuple[int, ...] = (0,)
    pseudo: bool | None = None
    expand: bool | None = None
    train_adapters: bool = True
    pseudo_conf: float = 0.5
    grad_norm_limit: float = 1e6
    clip: float = 1e4
    importance_samples: int = 256
    fisher_with_pseudo: bool = True

    def __post_init__(self):
        self.step_sizes = tuple(int(k) for k in self.step_sizes)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.lambda_grid = tuple(float(v) for v in self.lambda_grid)
        if not isinstance(self.train_size, int):
            self.train_size = tuple(int(v) for v in self.train_size)
        if isinstance(self.lam, (list, tuple)):
            self.lam = [float(v) for v in self.lam]
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        if not self.step_sizes or any(k < 1 for k in self.step_sizes):
            raise ConfigurationError("step sizes must be positive")
        if self.lr <= 0 or self.iterations < 1 or self.batch_size < 1:
            raise ConfigurationError("lr, iterations and batch size must be positive")
        if not 0.0 < self.lr_decay_at <= 1.0:
            raise ConfigurationError("lr_decay_at must lie in (0, 1]")
        if not 0.0 < self.pseudo_conf < 1.0:
            raise ConfigurationError("pseudo confidence must lie in (0, 1)")
        if not 0.0 < self.probe_fraction <= 1.0:
            raise ConfigurationError("probe_fraction must lie in (0, 1]")
        if not self.seeds:
            raise ConfigurationError("need at least one seed")
        lam = self.lam
        if isinstance(lam, str):
            if lam != "search":
                raise ConfigurationError(f"lam must be a number, a list or 'search', got {lam!r}")
        elif isinstance(lam, list):
            if len(lam) != len(self.step_sizes) - 1:
                raise ConfigurationError("per-step lambda list needs one value per incremental step")
            if any(v < 0 for v in lam):
                raise ConfigurationError("lambda must be non-negative")
        elif float(lam) < 0:
            raise ConfigurationError("lambda must be non-negative")

    @property
    def spec(self) -> MethodSpec:
        m = METHODS[self.method]
        if self.pseudo is not None:
            m = replace(m, pseudo=bool(self.pseudo))
        if self.expand is not None:
            m = replace(m, expand=bool(self.expand))
        return m

    @property
    def detector_config(self) -> DetectorConfig:
        d = dict(self.detector)
        if "strides" in d:
            d["strides"] = tuple(d["strides"])
        if "size_ranges" in d:
            d["size_ranges"] = tuple((float(lo), float(hi)) for lo, hi in d["size_ranges"])
        return DetectorConfig(**d)

    @property
    def scene_spec(self) -> SceneSpec:
        return SceneSpec.from_dict(self.scene)

    def lambda_for(self, step: int) -> float | str:
        """Penalty weight at incremental ``step`` (1-based)."""
        if isinstance(self.lam, list):
            return self.lam[step - 1]
        return self.lam

    def iterations_for(self, step: int) -> int:
        if not self.scale_iterations or step == 0:
            return self.iterations
        # same budget per class as the base step
        return max(1, round(self.iterations * self.step_sizes[step] / self.step_sizes[0]))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["lambda_grid"] = list(self.lambda_grid)
        return json.loads(json.dumps(d, default=_json_default))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _json_default(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    raise TypeError(f"cannot serialise {type(v).__name__}")


def load_data(config: ExperimentConfig) -> TaskProtocol:
    if config.data_dir:
        proto = load_protocol(config.data_dir)
        if tuple(proto.step_sizes) != config.step_sizes:
            raise ConfigurationError(f"data in {config.data_dir} has steps {proto.step_sizes}")
        return proto
    return build_protocol(config.scene_spec, config.step_sizes, config.train_size, config.test_size, config.data_seed)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainStats:
    iterations: int
    final_loss: float
    max_grad_norm: float
    wall_time: float


def train_detector(
    model: Detector,
    images: np.ndarray,
    annotations: Sequence[Sequence[BBox]],
    iterations: int,
    rng: np.random.Generator,
    lr: float = 0.1,
    momentum: float = 0.0,
    batch_size: int = 8,
    lr_decay_at: float = 0.75,
    frozen: Sequence[str] = (),
    penalty: Callable[[], Tensor] | None = None,
    grad_norm_limit: float = math.inf,
) -> TrainStats:
    """SGD on detection loss plus an optional penalty.

    ``images`` are floats [N, 1, H, W]. Parameters under ``frozen`` tags are
    excluded from differentiation and never written. Raises ExplosionError
    when the loss or gradient is non-finite or the global gradient norm
    exceeds ``grad_norm_limit``.
    """
    if len(images) != len(annotations) or len(images) == 0:
        raise UsageError("need a non-empty set of images with one annotation list each")
    targets = [assign_targets(a, model.config, model.seen_classes) for a in annotations]
    store = model.store
    frozen = list(frozen)
    frozen_names = [n for n in store.names() if frozen and tag_matches(n, frozen)]
    for n in frozen_names:
        store[n].tracked = False
    velocity: dict[str, np.ndarray] = {}
    decay_at = int(math.ceil(lr_decay_at * iterations))
    bs = min(batch_size, len(images))
    t0 = time.perf_counter()
    loss_val, max_norm = float("nan"), 0.0
    try:
        for it in range(iterations):
            idx = np.sort(rng.choice(len(images), bs, replace=False))
            store.zero_grad()
            raw = forward(model, Tensor(images[idx]))
            loss = detection_loss(raw, TargetMap.stack([targets[i] for i in idx]))
            if penalty is not None:
                loss = ad.add(loss, penalty())
            ad.backward(loss)
            norm = ad.global_grad_norm(t for _, t in store.items())
            if not math.isfinite(norm) or norm > grad_norm_limit:
                raise ExplosionError("global", f"gradient norm {norm:.3g} exceeds {grad_norm_limit:.3g} at iteration {it}")
            max_norm = max(max_norm, norm)
            loss_val = loss.item()
            sgd_step(store, lr if it < decay_at else lr * 0.1, frozen, momentum, velocity)
    finally:
        for n in frozen_names:
            store[n].tracked = True
    return TrainStats(iterations, loss_val, max_norm, time.perf_counter() - t0)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


# ---------------------------------------------------------------------------
# consolidation state


@dataclass
class Consolidation:
    """Anchors and importance carried between steps."""

    anchors: list = field(default_factory=list)  # per-task [(snapshot, importance)]
    snapshot: dict | None = None
    importance: dict | None = None

    def update(self, spec: MethodSpec, snapshot: dict, importance: dict) -> None:
        self.anchors.append((snapshot, importance))
        self.snapshot = snapshot
        self.importance = importance if self.importance is None else accumulate_importance(self.importance, importance)

    def penalty(self, spec: MethodSpec, store: ParameterStore, lam: float, clip: float) -> Callable[[], Tensor] | None:
        if not spec.regularized or lam == 0 or self.snapshot is None:
            return None
        if spec.penalty == "huber":
            return lambda: huber_clipped_penalty(store, self.snapshot, self.importance, lam, clip)
        if spec.anchoring == "per-task":
            return lambda: per_task_ewc_penalty(store, self.anchors, lam, spec.mask)
        return lambda: ewc_penalty(store, self.snapshot, self.importance, lam, spec.mask)


def estimate_importance(spec: MethodSpec, model: Detector, examples: Sequence, n: int) -> dict:
    if spec.importance == "fisher":
        return detector_fisher(model, examples, n)
    if spec.importance == "mas":
        return detector_mas(model, examples, n)
    raise ConfigurationError(f"method {spec.name} has no importance estimate")


# ---------------------------------------------------------------------------
# run records


@dataclass
class StepRecord:
    step: int
    classes: list[int]
    eval: dict
    lam: float | None
    iterations: int
    wall_time: float
    params: int
    added_params: int
    pseudo: dict | None = None
    final_loss: float | None = None

    @property
    def result(self) -> EvalResult:
        return EvalResult.from_dict(self.eval)


@dataclass
class RunRecord:
    method: str
    seed: int
    protocol: dict
    config: dict
    steps: list[StepRecord] = field(default_factory=list)
    explosions: list[dict] = field(default_factory=list)
    lambda_search: dict | None = None

    def append(self, step: StepRecord) -> None:
        if self.steps and step.step != self.steps[-1].step + 1:
            raise UsageError("steps are appended in order")
        self.steps.append(step)

    @property
    def lambdas(self) -> list[float | None]:
        return [s.lam for s in self.steps]

    @property
    def wall_time(self) -> float:
        return float(sum(s.wall_time for s in self.steps))

    def step_result(self, step: int) -> EvalResult:
        return self.steps[step].result

    def final_map(self, thresh: float = 0.5) -> float:
        last = self.steps[-1]
        return last.result.mean_ap(last.classes, thresh)

    def class_ap_history(self, thresh: float = 0.5) -> dict[int, list[float | None]]:
        hist: dict[int, list[float | None]] = {}
        for s in self.steps:
            res = s.result
            for c in s.classes:
                hist.setdefault(c, [None] * len(self.steps))
                if c in res.ap:
                    hist[c][s.step] = res.class_ap(c, thresh)
        return hist

    def introduced_at(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for s in self.steps:
            for c in s.classes:
                out.setdefault(c, s.step)
        return out

    def old_class_maps(self, step: int, thresh: float = 0.5) -> tuple[float, float]:
        """(mAP of classes older than ``step`` at ``step``, their end-of-own-step mAP)."""
        intro = self.introduced_at()
        old = [c for c, s in intro.items() if s < step]
        now = self.steps[step].result
        own = [self.steps[intro[c]].result for c in old]
        cur = [now.class_ap(c, thresh) for c in old if c in now.ap]
        then = [r.class_ap(c, thresh) for c, r in zip(old, own) if c in r.ap]
        return float(np.mean(cur)) if cur else float("nan"), float(np.mean(then)) if then else float("nan")

    def forgetting(self, step: int, thresh: float = 0.5) -> float:
        now, then = self.old_class_maps(step, thresh)
        return then - now

    def metrics_digest(self) -> str:
        """Hash over everything except wall times."""
        d = self.to_dict()
        for s in d["steps"]:
            s.pop("wall_time")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=_json_default))

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["steps"] = [StepRecord(**s) for s in d["steps"]]
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def protocol_info(config: ExperimentConfig, proto: TaskProtocol) -> dict:
    return {
        "step_sizes": list(proto.step_sizes),
        "classes": list(proto.classes),
        "train_sizes": list(proto.train_sizes),
        "test_size": proto.test_size,
        "data_seed": proto.seed,
        "scene": config.scene,
    }


# ---------------------------------------------------------------------------
# protocol runner


@dataclass
class _StepState:
    model: Detector
    consolidation: Consolidation
    record: StepRecord
    lam: float | None


class StepCache:
    """Memo of finished step states keyed by everything that shaped them.

    Methods that agree on a prefix of steps (every method on step 0, diode and
    constrained EWC before expansion) share the work. A hit returns exactly
    what recomputation would, so records do not depend on cache use.
    """

    def __init__(self):
        self._states: dict[str, _StepState] = {}
        self.hits = 0

    def get(self, key: str) -> _StepState | None:
        st = self._states.get(key)
        if st is None:
            return None
        self.hits += 1
        return _StepState(st.model.copy(), copy.deepcopy(st.consolidation), copy.deepcopy(st.record), st.lam)

    def put(self, key: str, state: _StepState) -> None:
        self._states[key] = _StepState(
            state.model.copy(), copy.deepcopy(state.consolidation), copy.deepcopy(state.record), state.lam
        )


_SHARED_KEYS = (
    "step_sizes", "scene", "train_size", "test_size", "data_seed", "data_dir", "detector", "lr", "momentum",
    "lr_decay_at", "iterations", "scale_iterations", "batch_size", "pseudo_conf", "grad_norm_limit",
    "importance_samples", "fisher_with_pseudo",
)  # fmt: skip


def _step_key(config: ExperimentConfig, seed: int, step: int, lam_trace: list) -> str:
    spec = config.spec
    shared = {k: v for k, v in config.to_dict().items() if k in _SHARED_KEYS}
    desc = []
    for s in range(1, step + 1):
        desc.append(
            {
                "importance": spec.importance if (spec.regularized and lam_trace[s] != 0) else None,
                "anchoring": spec.anchoring,
                "penalty": spec.penalty,
                "mask": spec.mask,
                "pseudo": spec.pseudo,
                "adapters": bool(spec.expand and s >= 2),
                "train_adapters": config.train_adapters if spec.expand and s >= 2 else None,
                "lam": lam_trace[s],
                "clip": config.clip if spec.penalty == "huber" else None,
            }
        )
    # importance estimated after this step is part of the state when the method needs one
    tail = spec.importance if spec.regularized else None
    return json.dumps([shared, seed, desc, tail], sort_keys=True, default=str)


def _pseudo_annotations(config, spec, prev: Detector, split, images) -> tuple[list[list[BBox]], dict | None]:
    if not spec.pseudo:
        return [list(a) for a in split.annotations], None
    pseudo = generate_pseudo(prev, images, config.pseudo_conf)
    merged = [merge_annotations(gt, ps, i).boxes for i, (gt, ps) in enumerate(zip(split.annotations, pseudo))]
    info = {"count": int(sum(len(p) for p in pseudo))}
    if split.withheld:
        # quality against the hidden full annotations, for reporting only
        recall, precision = pseudo_quality(pseudo, split.withheld, prev.seen_classes)
        info.update(recall=recall, precision=precision)
    return merged, info


def _evaluate(model: Detector, proto: TaskProtocol) -> dict:
    return evaluate_model(model, proto.test, model.seen_classes).to_dict()


def train_base(config: ExperimentConfig, proto: TaskProtocol, seed: int) -> tuple[Detector, TrainStats]:
    classes = proto.step_classes[0]
    model = Detector(config.detector_config, classes, seed=seed, dilatable=config.spec.expand)
    split = proto.train[0]
    stats = train_detector(
        model,
        split.float_images(),
        split.annotations,
        config.iterations_for(0),
        _rng(seed, 0, 1),
        config.lr,
        config.momentum,
        config.batch_size,
        config.lr_decay_at,
        grad_norm_limit=config.grad_norm_limit,
    )
    return model, stats


def _incremental_step(
    config: ExperimentConfig,
    proto: TaskProtocol,
    seed: int,
    step: int,
    prev: _StepState,
    lam: float,
    iterations: int | None = None,
    evaluate: bool = True,
) -> _StepState:
    spec = config.spec
    classes = proto.step_classes[step]
    split = proto.train[step]
    images = split.float_images()
    t0 = time.perf_counter()
    annotations, pinfo = _pseudo_annotations(config, spec, prev.model, split, images)
    model = prev.model.copy()
    model.dilatable = spec.expand
    before = model.store.num_params()
    expand_model(model, step, classes, expand_from=2 if spec.expand else None)
    policy = build_trainability_policy(step, len(proto.step_sizes) - 1)
    frozen = list(policy.frozen_tags)
    if not config.train_adapters:
        frozen += [f"dm_fpn.{step}", f"dm_ch.{step}"]
    cons = copy.deepcopy(prev.consolidation)
    penalty = cons.penalty(spec, model.store, lam, config.clip)
    n_iter = config.iterations_for(step) if iterations is None else iterations
    stats = train_detector(
        model,
        images,
        annotations,
        n_iter,
        _rng(seed, step, 1),
        config.lr,
        config.momentum,
        config.batch_size,
        config.lr_decay_at,
        frozen=frozen,
        penalty=penalty,
        grad_norm_limit=config.grad_norm_limit,
    )
    if spec.regularized and step < len(proto.step_sizes) - 1 and evaluate:
        _consolidate(config, spec, model, cons, images, annotations if config.fisher_with_pseudo else split.annotations)
    record = StepRecord(
        step,
        list(model.seen_classes),
        _evaluate(model, proto) if evaluate else {},
        float(lam),
        n_iter,
        time.perf_counter() - t0,
        model.store.num_params(),
        model.store.num_params() - before,
        pinfo,
        stats.final_loss,
    )
    return _StepState(model, cons, record, float(lam))


def _consolidate(config, spec, model, cons: Consolidation, images, annotations) -> None:
    examples = [(images[i], annotations[i]) for i in range(len(images))]
    importance = estimate_importance(spec, model, examples, config.importance_samples)
    cons.update(spec, model.store.snapshot(), importance)


def _base_state(config, proto, seed, cache: StepCache | None) -> _StepState:
    spec = config.spec
    key = _step_key(config, seed, 0, [None])
    st = cache.get(key) if cache is not None else None
    if st is not None:
        st.model.dilatable = spec.expand
        return st
    # the untouched base model is shared across all methods
    raw_key = json.dumps(["base", json.loads(key)[0], seed])
    base = cache.get(raw_key) if cache is not None else None
    if base is None:
        t0 = time.perf_counter()
        model, stats = train_base(config, proto, seed)
        record = StepRecord(
            0, list(model.seen_classes), _evaluate(model, proto), None, stats.iterations,
            time.perf_counter() - t0, model.store.num_params(), 0, None, stats.final_loss,
        )  # fmt: skip
        base = _StepState(model, Consolidation(), record, None)
        if cache is not None:
            cache.put(raw_key, base)
    base.model.dilatable = spec.expand
    if spec.regularized and len(proto.step_sizes) > 1:
        split = proto.train[0]
        t0 = time.perf_counter()
        _consolidate(config, spec, base.model, base.consolidation, split.float_images(), split.annotations)
        base.record.wall_time += time.perf_counter() - t0
    if cache is not None:
        cache.put(key, base)
    return base


def run_protocol(
    config: ExperimentConfig,
    seed: int | None = None,
    proto: TaskProtocol | None = None,
    cache: StepCache | None = None,
    log: Callable[[str], None] | None = None,
    observer: Callable[[int, Detector], None] | None = None,
) -> RunRecord:
    """Train every step of the protocol for one seed and evaluate after each.

    ``observer(step, model)`` is called with the model at the end of every
    step; it must not modify the model.
    """
    seed = config.seeds[0] if seed is None else int(seed)
    proto = load_data(config) if proto is None else proto
    spec = config.spec
    record = RunRecord(config.method, seed, protocol_info(config, proto), config.to_dict())
    log = log or (lambda msg: None)
    state = _base_state(config, proto, seed, cache)
    record.append(state.record)
    if observer is not None:
        observer(0, state.model)
    log(f"[{config.method} seed {seed}] step 0 mAP@0.5 {state.record.result.map50:.4f}")
    lam_trace: list = [None]
    for step in range(1, len(proto.step_sizes)):
        lam = config.lambda_for(step) if spec.regularized else 0.0
        if lam == "search":
            if step == 1:
                found = lambda_search(config, config.lambda_grid, seed=seed, proto=proto, base=state)
                record.lambda_search = found
                lam = found["lambda"]
            else:
                lam = record.lambda_search["lambda"]
        lam = float(lam)
        lam_trace.append(lam)
        key = _step_key(config, seed, step, lam_trace)
        cached = cache.get(key) if cache is not None else None
        if cached is not None:
            cached.model.dilatable = spec.expand
            state = cached
        else:
            try:
                state = _incremental_step(config, proto, seed, step, state, lam)
            except ExplosionError as err:
                record.explosions.append({"step": step, "lambda": lam, "param": err.param, "reason": err.reason})
                raise
            if cache is not None:
                cache.put(key, state)
        record.append(state.record)
        if observer is not None:
            observer(step, state.model)
        log(f"[{config.method} seed {seed}] step {step} lambda {lam:g} mAP@0.5 {state.record.result.map50:.4f}")
    return record


def run_experiment(config: ExperimentConfig, out_dir=None, cache: StepCache | None = None, log=None) -> list[RunRecord]:
    proto = load_data(config)
    records = []
    for seed in config.seeds:
        rec = run_protocol(config, seed, proto, cache, log)
        records.append(rec)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            rec.save(out / f"run-{config.method}-seed{seed}.json")
    return records


# ---------------------------------------------------------------------------
# lambda search


def critical_lambda(grid: Sequence[float], probe: Callable[[float], dict | None]) -> dict:
    """Largest grid value whose probe reports no explosion.

    ``probe(lam)`` returns None when stable or a dict describing the explosion.
    Grid values are probed in ascending order; the outcome table is returned
    alongside ``lambda``.
    """
    grid = [float(v) for v in grid]
    if not grid:
        raise UsageError("lambda grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise UsageError("lambda grid must be strictly ascending")
    if any(v < 0 for v in grid):
        raise UsageError("lambda grid values must be non-negative")
    outcomes = []
    for lam in grid:
        outcomes.append({"lambda": lam, "explosion": probe(lam)})
    stable = [o["lambda"] for o in outcomes if o["explosion"] is None]
    if not stable:
        raise ExplosionError("lambda", f"every grid value exploded (smallest {grid[0]:g})")
    best = max(stable)
    if len(stable) == len(grid) and best > 0:
        # a zero penalty cannot explode, so there is nothing to saturate
        warnings.warn("no grid value exploded; returning the largest, the critical point may lie beyond the grid")
    return {"lambda": best, "outcomes": outcomes, "saturated": len(stable) == len(grid)}


def penalty_probe(
    store: ParameterStore,
    snapshot: dict,
    importance: dict,
    lr: float,
    iterations: int,
    grad_norm_limit: float,
    loss_fn: Callable[[ParameterStore], Tensor] | None = None,
    mask: Sequence[str] | None = None,
) -> Callable[[float], dict | None]:
    """Probe factory for a bare parameter store: SGD on ``loss_fn`` plus the EWC penalty."""

    def probe(lam: float) -> dict | None:
        work = store.copy()
        for it in range(iterations):
            work.zero_grad()
            loss = ewc_penalty(work, snapshot, importance, lam, mask)
            if loss_fn is not None:
                loss = ad.add(loss, loss_fn(work))
            try:
                ad.backward(loss)
            except ExplosionError as err:
                return {"iteration": it, "reason": err.reason}
            norm = ad.global_grad_norm(t for _, t in work.items())
            if not math.isfinite(norm) or norm > grad_norm_limit:
                return {"iteration": it, "reason": f"gradient norm {norm:.3g}"}
            sgd_step(work, lr)
        return None

    return probe


def lambda_search(
    config: ExperimentConfig,
    grid: Sequence[float] | None = None,
    seed: int | None = None,
    proto: TaskProtocol | None = None,
    base: _StepState | None = None,
    probe_fraction: float | None = None,
) -> dict:
    """Critical lambda of the first incremental step, found with short probes."""
    grid = config.lambda_grid if grid is None else grid
    if not grid:
        raise UsageError("lambda grid is empty")
    seed = config.seeds[0] if seed is None else seed
    proto = load_data(config) if proto is None else proto
    if len(proto.step_sizes) < 2:
        raise UsageError("lambda search needs at least one incremental step")
    base = _base_state(config, proto, seed, None) if base is None else base
    fraction = config.probe_fraction if probe_fraction is None else probe_fraction
    n_iter = max(1, int(round(fraction * config.iterations_for(1))))

    def probe(lam: float) -> dict | None:
        try:
            # overflow on the way to an explosion is expected here
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                _incremental_step(config, proto, seed, 1, base, lam, iterations=n_iter, evaluate=False)
        except ExplosionError as err:
            return {"param": err.param, "reason": err.reason}
        return None

    out = critical_lambda(grid, probe)
    out["probe_iterations"] = n_iter
    return out


# ---------------------------------------------------------------------------
# reports


def _mean_std(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}


def emit_report(records: Sequence[RunRecord], out_dir, channels: int | None = None, levels: int | None = None) -> dict:
    """Per-step mAP, forgetting and parameter-growth tables (CSV and JSON).

    Values are means (with population std) over the seeds of each method.
    """
    if not records:
        raise UsageError("no run records to report")
    ref = records[0].protocol
    for r in records:
        if r.protocol != ref:
            raise UsageError("records come from different protocols")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = list(dict.fromkeys(r.method for r in records))
    n_steps = len(ref["step_sizes"])
    by_method = {m: [r for r in records if r.method == m] for m in methods}

    map_rows, forget_rows, growth_rows = [], [], []
    for m in methods:
        recs = by_method[m]
        row = {"method": m, "seeds": [r.seed for r in recs]}
        frow = {"method": m}
        for s in range(n_steps):
            row[f"step{s}"] = _mean_std([r.steps[s].result.mean_ap(r.steps[s].classes) for r in recs])
            if s:
                frow[f"step{s}"] = _mean_std([r.forgetting(s) for r in recs])
        row["lambda"] = recs[0].lambdas
        map_rows.append(row)
        forget_rows.append(frow)
        rec = recs[0]
        base = rec.steps[0].params
        cum = 0
        for s in range(n_steps):
            cum += rec.steps[s].added_params
            growth_rows.append(
                {
                    "method": m, "step": s, "added": rec.steps[s].added_params, "cumulative": cum,
                    "cumulative_ratio": cum / base,
                }
            )  # fmt: skip

    cfg = records[0].config
    det = ExperimentConfig.from_dict(cfg).detector_config
    closed_form = count_added_params(
        channels or det.channels, levels or det.levels, ref["step_sizes"], records[0].steps[0].params
    )
    report = {
        "protocol": ref,
        "map50": map_rows,
        "forgetting": forget_rows,
        "param_growth": growth_rows,
        "param_growth_closed_form": closed_form,
    }
    (out / "report.json").write_text(json.dumps(report, indent=1))
    _write_table(out / "map50.csv", map_rows, n_steps, start=0)
    _write_table(out / "forgetting.csv", forget_rows, n_steps, start=1)
    with open(out / "param_growth.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "step", "added", "cumulative", "cumulative_ratio"])
        w.writeheader()
        w.writerows(growth_rows)
    return report


def _write_table(path: Path, rows: list[dict], n_steps: int, start: int) -> None:
    cols = [f"step{s}" for s in range(start, n_steps)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [f"{c}_mean" for c in cols] + [f"{c}_std" for c in cols])
        for row in rows:
            w.writerow([row["method"]] + [row[c]["mean"] for c in cols] + [row[c]["std"] for c in cols])


def load_records(runs_dir) -> list[RunRecord]:
    paths = sorted(Path(runs_dir).glob("run-*.json"))
    if not paths:
        raise UsageError(f"no run-*.json records in {runs_dir}")
    return [RunRecord.load(p) for p in paths]
