"""Parameter containers and the layers the backbone and textual head are built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .. import tensor as T
from ..tensor import Tensor


class Module:
    """Walks attributes to find parameters (Tensors), submodules and buffers.

    Buffers are numpy arrays named in ``_buffers``; they are checkpointed but
    never differentiated.
    """

    _buffers: tuple[str, ...] = ()
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data for n, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [n for n in list(params) + list(buffers) if n not in state]
        if strict and missing:
            raise KeyError(f"missing tensors: {missing[:5]}")
        for n, p in params.items():
            if n in state:
                if state[n].shape != p.shape:
                    raise ValueError(f"{n}: shape {state[n].shape} != {p.shape}")
                p.data = np.array(state[n], dtype=p.dtype, copy=True)
        for n, b in buffers.items():
            if n in state:
                b[...] = state[n]


def uniform_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int | None = None,
                 dtype=np.float32) -> np.ndarray:
    """He-uniform when only fan_in is given, Glorot-uniform otherwise."""
    bound = math.sqrt(6.0 / fan_in) if fan_out is None else math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32, zero: bool = False):
        w = np.zeros((n_in, n_out), dtype) if zero else uniform_init(rng, (n_in, n_out), n_in, n_out, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, dtype=np.float32):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Tensor(uniform_init(rng, (c_out, c_in, k, k), c_in * k * k, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int, dtype=np.float32, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(c, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype)
        self.running_var = np.ones(c, dtype)
        self.momentum = momentum

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def causal_mask(t: int, dtype=np.float32) -> np.ndarray:
    """Additive mask blocking attention from position i to any j > i."""
    return np.triu(np.full((t, t), -1e9, dtype=dtype), k=1)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, cross: bool, dtype=np.float32):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads, self.cross = heads, cross
        if cross:
            self.q = Linear(d, d, rng, dtype=dtype)
            self.kv = Linear(d, 2 * d, rng, dtype=dtype)
        else:
            self.qkv = Linear(d, 3 * d, rng, dtype=dtype)
        self.out = Linear(d, d, rng, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return T.transpose(T.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, memory: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        b, t, d = x.shape
        if self.cross:
            q = self.q(x)
            kv = self.kv(memory)
            k, v = T.getitem(kv, (Ellipsis, slice(0, d))), T.getitem(kv, (Ellipsis, slice(d, None)))
        else:
            qkv = self.qkv(x)
            q, k, v = (T.getitem(qkv, (Ellipsis, slice(i * d, (i + 1) * d))) for i in range(3))
        q, k, v = self._split(q), self._split(k), self._split(v)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // self.heads))
        if mask is not None:
            scores = T.add(scores, Tensor(mask))
        ctx = T.matmul(T.softmax(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.out(ctx)


class DecoderLayer(Module):
    """Masked self-attention, cross-attention over visual features, feed-forward.

    Each sublayer is followed by dropout, residual sum and LayerNorm.
    """

    def __init__(self, d: int, heads: int, ffn: int, dropout: float, rng: np.random.Generator, dtype=np.float32):
        self.self_attn = MultiHeadAttention(d, heads, rng, cross=False, dtype=dtype)
        self.norm1 = LayerNorm(d, dtype)
        self.cross_attn = MultiHeadAttention(d, heads, rng, cross=True, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ff1 = Linear(d, ffn, rng, dtype=dtype)
        self.ff2 = Linear(ffn, d, rng, dtype=dtype)
        self.norm3 = LayerNorm(d, dtype)
        self.p = dropout

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray, rng=None) -> Tensor:
        drop = lambda h: T.dropout(h, self.p, rng, self.training)  # noqa: E731
        x = self.norm1(T.add(x, drop(self.self_attn(x, mask=mask))))
        x = self.norm2(T.add(x, drop(self.cross_attn(x, memory=memory))))
        return self.norm3(T.add(x, drop(self.ff2(T.relu(self.ff1(x))))))
