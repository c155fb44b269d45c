"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op records a node on the calling thread's active
:class:`GradTape` when at least one input requires a gradient.  The tape is
appended in execution order, so it is already topologically sorted;
:func:`backward` walks it in reverse and then consumes it.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand extents are incompatible with the op."""


class TapeStateError(RuntimeError):
    """Backward was requested on a tape that cannot serve it."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of differentiable ops executed on one thread."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        if self.consumed:
            raise TapeStateError("cannot record on a consumed tape")
        self.nodes.append(node)


_local = threading.local()


def _state():
    if not hasattr(_local, "tape"):
        _local.tape = GradTape()
        _local.enabled = True
    return _local


def current_tape() -> GradTape:
    return _state().tape


def reset_tape() -> GradTape:
    """Drop whatever the active tape holds and start a fresh one."""
    st = _state()
    st.tape = GradTape()
    return st.tape


@contextmanager
def no_grad():
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


def is_grad_enabled() -> bool:
    return _state().enabled


# Checked after every forward op; flip off only for profiling.
CHECK_FINITE = True


def _check(op: str, arr: np.ndarray) -> None:
    if CHECK_FINITE and arr.size and not np.isfinite(arr.sum(dtype=np.float64)):
        raise NonFiniteError(f"non-finite values produced by {op} (shape {arr.shape})")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _wrap(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    _check(op, out)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t._node = None
    st = _state()
    needs = st.enabled and any(i.requires_grad for i in inputs)
    t.requires_grad = needs
    if needs:
        node = _Node(op, tuple(inputs), t, backward)
        t._node = node
        st.tape.record(node)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _scalar_like(other, ref: Tensor) -> Tensor:
    if isinstance(other, Tensor):
        return other
    return Tensor(np.asarray(other, dtype=ref.dtype))


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = _scalar_like(b, a)
    out = a.data + b.data

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _wrap("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = _scalar_like(b, a)
    out = a.data - b.data

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _wrap("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = _scalar_like(b, a)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _wrap("mul", out, (a, b), bw)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = _scalar_like(b, a)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _wrap("div", out, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _wrap("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")
    out = np.log(x.data)
    return _wrap("log", out, (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask
    return _wrap("relu", out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _wrap("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; survivors are scaled by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _wrap("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _wrap("sum", out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _wrap("mean", out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _wrap("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _wrap("transpose", out, (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _wrap("concat", out, xs, bw)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis for i in parts)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _wrap("getitem", np.array(out), (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold batch axes into one GEMM
                k = a.shape[-1]
                a2 = np.broadcast_to(a.data, g.shape[:-1] + (k,)).reshape(-1, k)
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _wrap("matmul", out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding index out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _wrap("embedding", out, (table,), bw)


# ---------------------------------------------------------------------------
# normalization and probabilities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _wrap("softmax", out, (x,), bw)


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _wrap("layer_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of a B×C×H×W batch.

    In training mode the batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers are applied as constants.
    """
    if x.ndim != 4:
        raise DimensionError("batch_norm expects B×C×H×W input")
    shape = (1, -1, 1, 1)
    if not training:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(shape)) * inv.reshape(shape)
        out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

        def bw_eval(g):
            gx = g * (gamma.data * inv).reshape(shape) if x.requires_grad else None
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            return gx, gg, gb

        return _wrap("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), bw_eval)

    n = x.data.size // x.shape[1]
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu.reshape(shape)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    running_mean *= 1 - momentum
    running_mean += momentum * mu
    running_var *= 1 - momentum
    running_var += momentum * var * (n / max(n - 1, 1))

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gh = g * gamma.data.reshape(shape)
            gx = inv.reshape(shape) * (gh - (gb * gamma.data / n).reshape(shape)
                                       - xhat * (gg * gamma.data / n).reshape(shape))
        return gx, (gg if gamma.requires_grad else None), (gb if beta.requires_grad else None)

    return _wrap("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ignored."""
    if logits.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects N×V logits")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise DimensionError(f"{targets.shape[0]} targets for {n} rows")
    valid = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("every row is ignored; the mean loss is undefined")
    if np.any((targets[valid] < 0) | (targets[valid] >= v)):
        raise DimensionError("target index out of range")
    logp = log_softmax_np(logits.data)
    rows = np.nonzero(valid)[0]
    picked = logp[rows, targets[rows]]
    out = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def bw(g):
        grad = np.exp(logp)
        grad[rows, targets[rows]] -= 1.0
        grad[~valid] = 0.0
        return (grad * (g / count),)

    return _wrap("softmax_cross_entropy", out, (logits,), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over every element, computed from logits."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"targets {y.shape} do not match logits {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(loss.mean(), dtype=logits.dtype)

    def bw(g):
        return ((_sigmoid(z) - y) * (g / z.size),)

    return _wrap("bce_with_logits", out, (logits,), bw)


# ---------------------------------------------------------------------------
# convolution and pooling


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation of B×C×H×W input with F×C×kh×kw filters."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects rank-4 input and weight")
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"input has {C} channels, weight expects {Cw}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError("kernel larger than padded input")
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    wmat = w.data.reshape(F, -1)
    nhwc = C >= 4 and not (kh == 1 and kw == 1 and padding == 0)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, C)
    elif C >= 4:
        # channels-last columns: one contiguous copy per kernel offset
        wmat = w.data.transpose(0, 2, 3, 1).reshape(F, -1)
        xp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=x.dtype)
        xp[:, padding:padding + H, padding:padding + W] = x.data.transpose(0, 2, 3, 1)
        cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
        cols = cols.reshape(B * Ho * Wo, -1)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gw = None
        if w.requires_grad:
            gw = gmat.T @ cols
            gw = gw.reshape(F, kh, kw, C).transpose(0, 3, 1, 2) if nhwc else gw.reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = gmat @ wmat
            if kh == 1 and kw == 1 and padding == 0:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gcols.reshape(B, Ho, Wo, C).transpose(0, 3, 1, 2)
            elif nhwc:
                gcols = gcols.reshape(B, Ho, Wo, kh, kw, C)
                gxp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, i, j]
                gx = np.ascontiguousarray(gxp[:, padding:padding + H, padding:padding + W].transpose(0, 3, 1, 2))
            else:
                gcols = gcols.reshape(B, Ho, Wo, C, kh, kw)
                gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _wrap("conv2d", out, inputs, bw)


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = stride or kernel
    if x.ndim != 4:
        raise DimensionError("maxpool2d expects B×C×H×W input")
    B, C, H, W = x.shape
    if kernel > H + 2 * padding or kernel > W + 2 * padding:
        raise DimensionError("pool window larger than padded input")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    Ho, Wo = _conv_out(H, kernel, stride, padding), _conv_out(W, kernel, stride, padding)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += g * hit
        return (gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp,)

    return _wrap("maxpool2d", np.ascontiguousarray(out), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects B×C×H×W input")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to((g / hw)[:, :, None, None], x.shape).astype(x.dtype),)

    return _wrap("global_avg_pool", out, (x,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``; consumes the tape."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise TapeStateError("loss was not produced by a recorded op (empty tape or no_grad)")
    tape = current_tape()
    if tape.consumed or not tape.nodes or node not in _tail(tape, node):
        raise TapeStateError("the tape holding this loss has already been consumed")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(tape.nodes):
        g = grads.pop(id(nd.output), None)
        if g is None:
            continue
        in_grads = nd.backward(g)
        for inp, gi in zip(nd.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.dtype != inp.dtype:
                gi = gi.astype(inp.dtype)
            if inp._node is None:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    for nd in tape.nodes:
        nd.output._node = None
    tape.nodes.clear()
    tape.consumed = True
    reset_tape()


def _tail(tape: GradTape, node: _Node):
    # membership by identity; the loss is almost always the last node
    if tape.nodes and tape.nodes[-1] is node:
        return (node,)
    return [n for n in tape.nodes if n is node]
