"""Dense tensors with reverse-mode automatic differentiation.

Every op records a closure that maps the output gradient to input gradients.
Calling ``Tensor.backward`` walks the graph once in reverse topological order.

Two numeric modes exist: float64 for gradient checking and float32 for
training. The mode is a process-wide setting (see :func:`set_mode`).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True

# additive mask value for excluded attention keys; exp() underflows to exactly 0
NEG_INF = -1e9


class NumericError(ArithmeticError):
    """Non-finite values or a degenerate quantity (e.g. a zero norm)."""


class ShapeError(ValueError):
    pass


def set_mode(mode: str) -> None:
    global _DTYPE
    if mode not in ("float32", "float64"):
        raise ValueError(f"unknown numeric mode {mode!r}")
    _DTYPE = np.float64 if mode == "float64" else np.float32


def get_mode() -> str:
    return "float64" if _DTYPE == np.float64 else "float32"


def dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(mode: str):
    old = get_mode()
    set_mode(mode)
    try:
        yield
    finally:
        set_mode(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {what}")
        return self

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.array(grad, dtype=self.data.dtype).reshape(self.shape)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # interior nodes drop their gradient and closure once consumed
            node.grad = None
            node._backward = None
            node._parents = ()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return gather(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _result(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True)


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(out_data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _result(-a.data, (a,), backward, "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(out_data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _result(a.data * c, (a,), backward, "scale")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _result(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")

    def backward(g):
        _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), backward, "log")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)

    def backward(g):
        _accum(a, g * s * (1.0 - s))

    return _result(s, (a,), backward, "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)

    def backward(g):
        _accum(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _result(a.data * s, (a,), backward, "silu")


# ----------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out_data, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _result(np.transpose(a.data, axes), (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accum(t, piece)

    return _result(out_data, tensors, backward, "concat")


def gather(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    out_data = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accum(a, full)

    return _result(np.array(out_data, copy=True), (a,), backward, "gather")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    out_data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _result(out_data, (table,), backward, "embedding")


# ----------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(out_data, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / count)


# ----------------------------------------------------------------------------
# normalisation and probabilities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.any(np.isnan(x.data)):
        raise NumericError("NaN input to softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accum(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.any(np.isnan(x.data)):
        raise NumericError("NaN input to log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    p = np.exp(out_data)

    def backward(g):
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _result(out_data, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data
    d = x.shape[-1]

    def backward(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            dx = (gx - gx.mean(axis=-1, keepdims=True)
                  - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d) * inv
            _accum(x, dx)

    return _result(out_data, (x, gain, bias), backward, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, min_norm: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm < min_norm) or not np.all(np.isfinite(norm)):
        raise NumericError("l2_normalize of a zero (or non-finite) vector")
    y = x.data / norm

    def backward(g):
        _accum(x, (g - y * (g * y).sum(axis=axis, keepdims=True)) / norm)

    return _result(y, (x,), backward, "l2_normalize")


def cross_entropy_from_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Negative log-likelihood of integer ``targets`` under softmax(logits).

    Without ``weights`` the result is the mean over all target positions.
    With ``weights`` (same shape as ``targets``) it is ``sum(weights * nll)``,
    which lets callers express masked or per-sequence means.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}")
    if np.any(np.isnan(logits.data)):
        raise NumericError("NaN logits")
    if weights is None:
        w = np.full(targets.shape, 1.0 / max(targets.size, 1), dtype=logits.data.dtype)
    else:
        w = np.asarray(weights, dtype=logits.data.dtype)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out_data = np.asarray(-(w * picked).sum())

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        _accum(logits, g * w[..., None] * (p - onehot))

    return _result(out_data, (logits,), backward, "cross_entropy")


# ----------------------------------------------------------------------------
# verification


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``fn`` maps a tensor to a scalar tensor. Runs in float64 regardless of the
    ambient mode. The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    with precision("float64"):
        x = parameter(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64))
        out = fn(x)
        _check_scalar(out)
        out.backward()
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        numeric = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            xp = flat[i]
            fp = _eval_scalar(fn, x)
            flat[i] = orig - step
            xm = flat[i]
            fm = _eval_scalar(fn, x)
            flat[i] = orig
            # divide by the realised spacing, not 2h, so representation error in x±h cancels
            numeric.reshape(-1)[i] = (fp - fm) / (xp - xm)
        return relative_error(analytic, numeric)


def grad_check_many(fn: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5,
                    coords: dict | None = None) -> float:
    """Like :func:`grad_check` for a closure over several leaf tensors.

    ``coords`` optionally restricts, per tensor position, which flat indices are
    perturbed. Callers are responsible for float64 mode.
    """
    if get_mode() != "float64":
        raise NumericError("grad_check_many requires float64 mode")
    for t in tensors:
        t.grad = None
    out = fn()
    _check_scalar(out)
    out.backward()
    worst = 0.0
    for k, t in enumerate(tensors):
        analytic = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        idx = range(flat.size) if coords is None or k not in coords else coords[k]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            xp = flat[i]
            fp = _eval_scalar(lambda _: fn(), t)
            flat[i] = orig - step
            xm = flat[i]
            fm = _eval_scalar(lambda _: fn(), t)
            flat[i] = orig
            num = (fp - fm) / (xp - xm)
            worst = max(worst, relative_error(np.array([analytic[i]]), np.array([num])))
    return worst


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _check_scalar(out: Tensor) -> None:
    if out.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite")


def _eval_scalar(fn, x) -> float:
    with no_grad():
        v = fn(x)
    val = float(v.data.reshape(-1)[0])
    if not math.isfinite(val):
        raise NumericError("function value is not finite")
    return val


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
