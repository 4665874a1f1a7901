"""Named, group-tagged parameter collections, SGD and binary checkpoints.

Parameter names are dotted paths whose leading components carry the group
tag, e.g. ``backbone.conv1.weight`` (group ``backbone``),
``cls_head.2.weight`` (group ``cls_head.2``) or ``dm_fpn.2.0.weight``
(group ``dm_fpn.2.0``).
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from diode.autodiff import Tensor
from diode.errors import ConfigurationError, UsageError

# families whose second name component is part of the group tag
_INDEXED = {"fpn": 1, "cls_head": 1, "dm_ch": 1, "dm_fpn": 2}

CHECKPOINT_MAGIC = b"DIODE1"
IMPORTANCE_MAGIC = b"IMPT1"


def group_of(name: str) -> str:
    """Group tag of a parameter name (``fpn.0.lateral.weight`` -> ``fpn.0``)."""
    parts = name.split(".")
    depth = _INDEXED.get(parts[0], 0)
    return ".".join(parts[: 1 + depth])


def family_of(name: str) -> str:
    return name.split(".", 1)[0]


def tag_matches(name: str, tags: Iterable[str]) -> bool:
    """True if ``name`` falls in any of ``tags``; a tag is a family or a full group."""
    group = group_of(name)
    fam = family_of(name)
    for tag in tags:
        if tag == fam or tag == group or group.startswith(tag + "."):
            return True
    return False


class ParameterStore:
    """Ordered mapping from parameter name to tracked leaf tensor."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise UsageError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), tracked=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigurationError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def groups(self) -> list[str]:
        seen: dict[str, None] = {}
        for name in self._params:
            seen.setdefault(group_of(name), None)
        return list(seen)

    def select(self, tags: Iterable[str]) -> list[str]:
        tags = list(tags)
        return [n for n in self._params if tag_matches(n, tags)]

    def num_params(self, names: Iterable[str] | None = None) -> int:
        names = self._params if names is None else names
        return int(sum(self._params[n].size for n in names))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def snapshot(self) -> dict[str, np.ndarray]:
        """Deep, read-only copy of all values."""
        snap = {}
        for name, t in self._params.items():
            v = t.data.copy()
            v.flags.writeable = False
            snap[name] = v
        return snap

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        for name, v in values.items():
            t = self[name]
            if t.shape != np.shape(v):
                raise ConfigurationError(f"{name}: shape {np.shape(v)} != {t.shape}")
            t.data = np.array(v, dtype=np.float64)

    def copy(self) -> "ParameterStore":
        return ParameterStore({n: t.data for n, t in self._params.items()})

    def digest(self, names: Iterable[str] | None = None) -> dict[str, str]:
        names = self._params if names is None else names
        return {n: hashlib.sha256(self._params[n].data.tobytes()).hexdigest() for n in names}


def sgd_step(
    store: ParameterStore,
    lr: float,
    frozen: Iterable[str] = (),
    momentum: float = 0.0,
    velocity: dict[str, np.ndarray] | None = None,
) -> None:
    """``theta -= lr * grad`` for every parameter outside the frozen tags.

    With ``momentum > 0`` the caller owns ``velocity``, a dict updated in place
    as ``v = momentum * v + grad`` before the step uses ``v``.
    """
    if lr <= 0:
        raise UsageError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise UsageError("momentum must lie in [0, 1)")
    if momentum and velocity is None:
        raise UsageError("momentum needs a velocity buffer")
    frozen = list(frozen)
    for name, t in store.items():
        if frozen and tag_matches(name, frozen):
            continue
        if t.grad is None:
            raise UsageError(f"missing gradient for trainable parameter {name!r}")
        step = t.grad
        if momentum:
            v = velocity.get(name)
            step = t.grad.copy() if v is None else momentum * v + t.grad
            velocity[name] = step
        t.data = t.data - lr * step


# ---------------------------------------------------------------------------
# binary record format


def _write_records(path: Path, magic: bytes, records: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(records)))
        for name, value in records.items():
            arr = np.asarray(value, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def _read_records(path: Path, magic: bytes) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(magic):
        raise ConfigurationError(f"{path}: bad magic, expected {magic!r}")
    pos = len(magic)

    def unpack(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = unpack("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = unpack("<I")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = unpack("<I")
        dims = unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(dims)
        pos += 8 * n
        out[name] = arr.astype(np.float64)
    if pos != len(data):
        raise ConfigurationError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def save_checkpoint(store: ParameterStore | Mapping[str, np.ndarray], path) -> None:
    if isinstance(store, ParameterStore):
        records = {n: t.data for n, t in store.items()}
    else:
        records = dict(store)
    _write_records(Path(path), CHECKPOINT_MAGIC, records)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return _read_records(Path(path), CHECKPOINT_MAGIC)


def save_importance(importance: Mapping[str, np.ndarray], path) -> None:
    _write_records(Path(path), IMPORTANCE_MAGIC, importance)


def load_importance(path) -> dict[str, np.ndarray]:
    return _read_records(Path(path), IMPORTANCE_MAGIC)
