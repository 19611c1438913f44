"""Dense tensors with a reverse-mode gradient tape.

Storage is a row-major numpy array (float32 for training, float64 for
gradient checks). Every op checks its output for NaN/Inf and raises
:class:`InvalidValue` instead of propagating it.

Recording happens only while a :class:`Tape` is active::

    with Tape() as tape:
        w = Tensor(w0, requires_grad=True)
        loss = (w * w).sum()
    (gw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import InvalidValue, ShapeError

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)


class _Record:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Single-use recorder of differentiable ops.

    Records are appended in execution order, which is already a topological
    order, so the backward pass is one reverse sweep.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._used = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        if self._used:
            raise RuntimeError("tape already consumed by a backward pass")
        self._used = True
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self.records.clear()
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def no_grad_active() -> bool:
    return not _TAPES


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise InvalidValue(f"{op} produced non-finite values")
    return arr


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(_finite(data, op))
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1].records.append(_Record(out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary_operands(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    # python scalars adopt the tensor's dtype so float32 graphs stay float32
    if a.data.ndim == 0 and not a.requires_grad:
        a = Tensor(a.data.astype(b.dtype))
    if b.data.ndim == 0 and not b.requires_grad:
        b = Tensor(b.data.astype(a.dtype))
    return a, b


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / math.sqrt(2.0)))
    out = (d * cdf).astype(d.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
        return ((g * (cdf + d * pdf)).astype(d.dtype, copy=False),)
    return _make(out, (x,), backward, "gelu")


# --- shape -----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)
    return _make(x.data[idx], (x,), backward, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward, "concat")


# --- reductions and linear algebra -------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --- normalisation and probability ops ----------------------------------------

def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def _check_finite_input(x: Tensor, op: str):
    if not np.isfinite(x.data).all():
        raise InvalidValue(f"{op} received non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    _check_finite_input(x, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    _check_finite_input(x, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    if eps <= 0:
        raise InvalidValue("eps must be positive")
    _check_finite_input(x, "layer_norm")
    with np.errstate(over="ignore", invalid="ignore"):
        mu = x.data.mean(axis=-1, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
    # an overflowed variance would silently squash the row to the bias
    _finite(var, "layer_norm variance")
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return _make(out, (x, gain, bias), backward, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, x.dtype.type(eps))
    out = x.data / denom

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        scale = (norm > eps).astype(x.dtype)
        return ((g - out * proj * scale) / denom,)
    return _make(out, (x,), backward, "l2_normalize")


def _check_distribution(q: np.ndarray, tol: float = 1e-6):
    if (q < 0).any() or not np.isfinite(q).all():
        raise InvalidValue("q must be non-negative and finite")
    s = q.sum(axis=-1)
    if np.abs(s - 1.0).max(initial=0.0) > tol:
        raise InvalidValue("q must sum to 1 along the last axis")


def cross_entropy(q, log_p, check: bool = True) -> Tensor:
    """``-sum(q * log_p)`` over the last axis (one value per leading row)."""
    q, log_p = _as_tensor(q), _as_tensor(log_p)
    if q.shape != log_p.shape:
        raise ShapeError(f"q {q.shape} and log_p {log_p.shape} differ")
    if check:
        _check_distribution(q.data, 1e-6 if q.dtype == np.float64 else 1e-4)
    out = -(q.data * log_p.data).sum(axis=-1)

    def backward(g):
        g = np.expand_dims(g, -1)
        return -g * log_p.data, -g * q.data
    return _make(np.asarray(out), (q, log_p), backward, "cross_entropy")


def entropy(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    return -t.sum(axis=-1)


# --- gradient checking -------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise InvalidValue("eps must lie in (0, 1e-2]")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    if x0.dtype not in (np.float32, np.float64):
        x0 = x0.astype(np.float64)
    with Tape() as tape:
        xt = Tensor(x0, requires_grad=True)
        y = f(xt)
    if not np.isfinite(y.data).all():
        raise InvalidValue("f returned a non-finite value")
    (analytic,) = tape.gradient(y, [xt])

    flat = x0.reshape(-1)
    numeric = np.empty(flat.size, dtype=np.float64)
    step = x0.dtype.type(eps)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(x0)).data)
        flat[i] = orig - step
        fm = float(f(Tensor(x0)).data)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise InvalidValue("f returned a non-finite value")
        numeric[i] = (fp - fm) / (2.0 * float(step))
    a = analytic.reshape(-1).astype(np.float64)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)), initial=0.0))


def bilinear_weights(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` matrix for 1-D bilinear resampling.

    Half-pixel centres, edges clamped. Resampling a 2-D grid is separable:
    ``Wr @ grid @ Wc.T``.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError("extents must be positive")
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(math.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        w[i, lo] += 1.0 - frac
        w[i, hi] += frac
    return w.astype(dtype)
