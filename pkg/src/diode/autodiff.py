"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the miniature detector and the importance estimators
need are provided. Binary operations accept either two tensors of the same
shape or a tensor and a scalar; there is no general broadcasting.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from diode.errors import ConfigurationError, ExplosionError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional float64 array with an optional gradient buffer.

    ``tracked`` tensors take part in differentiation. Leaves created by the
    user carry a ``name`` so that explosion signals can point at the
    offending parameter.
    """

    __slots__ = ("data", "grad", "tracked", "name", "op", "parents", "backward_fn")

    def __init__(self, data, tracked: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and min(arr.shape) == 0:
            raise ConfigurationError(f"tensor dims must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.tracked = bool(tracked)
        self.name = name
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.tracked else None

    def detach(self) -> "Tensor":
        return Tensor(self.data, tracked=False, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, tracked={self.tracked}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.tracked = any(p.tracked for p in parents)
    if out.tracked:
        out.op = op
        out.parents = tuple(parents)
        out.backward_fn = fn
    else:
        out.op = None
        out.parents = ()
        out.backward_fn = None
    return out


# ---------------------------------------------------------------------------
# tape and backward pass


class Tape:
    """Topologically ordered records reachable from one output node.

    Each record is ``(op, input node ids, output node id)``; every input id
    appears as an output (or leaf) before it is consumed.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.records = [
            (n.op, tuple(id(p) for p in n.parents), id(n)) for n in nodes if not n.is_leaf
        ]

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node.parents):
                if p.tracked and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every tracked leaf.

    Raises ExplosionError if the loss or any leaf gradient is non-finite.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not math.isfinite(loss.item()):
        raise ExplosionError("loss", "non-finite loss")
    if not loss.tracked:
        return Tape([])
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            leaves.append(node)
            continue
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.tracked:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf in leaves:
        if not np.all(np.isfinite(leaf.grad)):
            raise ExplosionError(leaf.name or "<unnamed>", "non-finite gradient")
    return tape


# ---------------------------------------------------------------------------
# elementwise


def _operands(a, b, opname: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ConfigurationError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _operands(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        "mul",
        (a, b),
        lambda g: (
            _reduce_to(g * bd, a) if a.tracked else None,
            _reduce_to(g * ad, b) if b.tracked else None,
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, "square", (a,), lambda g: (2.0 * ad * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, "exp", (a,), lambda g: (g * e,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make(
        np.asarray(a.data.mean()), "mean", (a,), lambda g: (np.full(shape, float(g) / n),)
    )


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        "transpose",
        (a,),
        lambda g: (g.transpose(inv),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, "concat", tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select entries along the first axis (``a[index]``)."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], "take_rows", (a,), fn)


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    n, c, h, w = a.shape
    data = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)
    return _make(
        data, "upsample2x", (a,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
    )


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with a [Cout, Cin, kH, kW] kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError("conv2d expects 4-d input and weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ConfigurationError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if bias.shape != (cout,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ConfigurationError(f"conv2d: {h}x{w} input smaller than {kh}x{kw} kernel")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    # gather patches channels-last; column order is (i, j, cin)
    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        buf = np.zeros((n, hp, wp, cin))
        buf[:, padding : padding + h, padding : padding + w, :] = xh
        xh = buf
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xh[:, :hspan:stride, :wspan:stride, :]).reshape(-1, cin)
    else:
        buf = np.empty((n, ho, wo, kh, kw, cin))
        for i in range(kh):
            for j in range(kw):
                buf[:, :, :, i, j, :] = xh[:, i : i + hspan : stride, j : j + wspan : stride, :]
        cols = buf.reshape(n * ho * wo, kh * kw * cin)
    wd = weight.data
    wmat = wd.transpose(0, 2, 3, 1).reshape(cout, kh * kw * cin)
    out = cols @ wmat.T
    out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = None
        if weight.tracked:
            gw = (gmat.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gb = gmat.sum(axis=0) if bias.tracked else None
        gx = None
        if x.tracked:
            gxp = np.zeros((n, hp, wp, cin))
            # contiguous per-offset slices keep matmul on the BLAS path
            wk = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))
            for i in range(kh):
                for j in range(kw):
                    contrib = (gmat @ wk[i, j]).reshape(n, ho, wo, cin)
                    gxp[:, i : i + hspan : stride, j : j + wspan : stride, :] += contrib
            if padding:
                gxp = gxp[:, padding : padding + h, padding : padding + w, :]
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        return gx, gw, gb

    return _make(out, "conv2d", (x, weight, bias), fn)


# ---------------------------------------------------------------------------
# fused losses (value and analytic derivative computed together)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy against probabilities ``targets``."""
    x, t = logits.data, np.asarray(targets, dtype=np.float64)
    if t.shape != x.shape:
        raise ConfigurationError(f"bce: target shape {t.shape} != {x.shape}")
    loss = _softplus(x) - x * t
    p = _sigmoid(x)
    return _make(loss, "bce_with_logits", (logits,), lambda g: (g * (p - t),))


def sigmoid_focal_loss(
    logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0
) -> Tensor:
    """Elementwise focal loss; ``gamma`` must be >= 1 for a finite derivative."""
    x, t = logits.data, np.asarray(targets, dtype=np.float64)
    if t.shape != x.shape:
        raise ConfigurationError(f"focal: target shape {t.shape} != {x.shape}")
    p = _sigmoid(x)
    ce = _softplus(x) - x * t
    p_t = p * t + (1.0 - p) * (1.0 - t)
    a_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    mod = (1.0 - p_t) ** gamma
    loss = a_t * mod * ce

    def fn(g):
        dpt = (2.0 * t - 1.0) * p * (1.0 - p)
        dmod = -gamma * (1.0 - p_t) ** (gamma - 1.0) * dpt
        return (g * a_t * (dmod * ce + mod * (p - t)),)

    return _make(loss, "sigmoid_focal_loss", (logits,), fn)


def iou_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """``1 - IoU`` per row for boxes given as distances (l, t, r, b) from a shared point."""
    pd, td = pred.data, np.asarray(target, dtype=np.float64)
    if pd.ndim != 2 or pd.shape[1] != 4 or td.shape != pd.shape:
        raise ConfigurationError(f"iou_loss expects [M,4] inputs, got {pd.shape}, {td.shape}")
    pl, pt, pr, pb = pd.T
    tl, tt, tr, tb = td.T
    area_p = (pl + pr) * (pt + pb)
    area_t = (tl + tr) * (tt + tb)
    wi = np.minimum(pl, tl) + np.minimum(pr, tr)
    hi = np.minimum(pt, tt) + np.minimum(pb, tb)
    inter = wi * hi
    union = area_p + area_t - inter
    iou = inter / union

    def fn(g):
        # d iou = (dI * (U + I) - I * dA_p) / U^2
        k = (union + inter) / union**2
        q = inter / union**2
        gl = hi * (pl < tl) * k - q * (pt + pb)
        gr = hi * (pr < tr) * k - q * (pt + pb)
        gt = wi * (pt < tt) * k - q * (pl + pr)
        gb = wi * (pb < tb) * k - q * (pl + pr)
        return (-g[:, None] * np.stack([gl, gt, gr, gb], axis=1),)

    return _make(1.0 - iou, "iou_loss", (pred,), fn)


def huber_penalty(
    theta: Tensor, anchor: np.ndarray, importance: np.ndarray, lam: float, clip: float
) -> Tensor:
    """Per-entry importance-weighted quadratic whose slope is clipped at ``clip``."""
    d = theta.data - anchor
    k = lam * importance
    slope = k * d
    inside = np.abs(slope) <= clip
    # outside the quadratic region k > clip / |d| > 0, so this only guards unused entries
    safe_k = np.where(inside, 1.0, k)
    quad = 0.5 * k * d * d
    lin = clip * np.abs(d) - clip * clip / (2.0 * safe_k)
    val = np.where(inside, quad, lin)
    grad = np.clip(slope, -clip, clip)
    return _make(val, "huber_penalty", (theta,), lambda g: (g * grad,))


# ---------------------------------------------------------------------------
# checks


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The denominator is ``max(|a|, |b|, 1e-8)``; a non-finite comparison yields inf.
    """
    x = np.array(x, dtype=np.float64)
    leaf = Tensor(x.copy(), tracked=True, name="x")
    out = f(leaf)
    if out.tracked:
        try:
            backward(out)
        except ExplosionError:
            return math.inf
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    flat = x.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(x)).item()
        flat[i] = orig - eps
        lo = f(Tensor(x)).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2 * eps)
    a = analytic.reshape(-1)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(numeric))):
        return math.inf
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0


def global_grad_norm(tensors: Iterable[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.dot(t.grad.reshape(-1), t.grad.reshape(-1)))
    return math.sqrt(total)
