"""Learning-rate schedule, SGD with momentum and folded weight decay, and LookAhead."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..tensor import DimensionError, Tensor


@dataclass(frozen=True)
class Schedule:
    max_lr: float
    total_steps: int
    warmup_fraction: float = 0.05

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if self.max_lr < 0:
            raise ValueError("max_lr must be non-negative")


def lr_at(schedule: Schedule, step: float) -> float:
    """Linear warmup to ``max_lr`` over the warmup fraction, then half-cosine decay to 0."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    t = step / schedule.total_steps
    w = schedule.warmup_fraction
    if t <= w:
        return schedule.max_lr * t / w
    return schedule.max_lr * 0.5 * (1.0 + math.cos(math.pi * (t - w) / (1.0 - w)))


class SGD:
    """v ← μ·v + g + λ·w ;  w ← w − lr·v"""

    def __init__(self, params: list[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        mu, lam = self.momentum, self.weight_decay
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if g is not None and g.shape != p.shape:
                raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if mu:
                v *= mu
            else:
                v[...] = 0
            if g is not None:
                v += g
            if lam:
                v += lam * p.data
            p.data -= p.dtype.type(lr) * v
        self.steps += 1


class LookAhead:
    """Every ``k`` inner steps: slow ← (1−α)·slow + α·fast, then fast ← slow."""

    def __init__(self, inner: SGD, k: int = 5, alpha: float = 0.5):
        if k < 1:
            raise ValueError("k must be at least 1")
        if not 0 <= alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        self.inner = inner
        self.k = k
        self.alpha = alpha
        self.slow = [p.data.copy() for p in inner.params]
        self.steps = 0

    @property
    def params(self):
        return self.inner.params

    def zero_grad(self) -> None:
        self.inner.zero_grad()

    def step(self, lr: float) -> None:
        self.inner.step(lr)
        self.steps += 1
        if self.steps % self.k == 0:
            self.sync()

    def sync(self) -> None:
        a = self.alpha
        for p, s in zip(self.inner.params, self.slow):
            s[...] = s * (1 - a) + p.data * a
            p.data[...] = s
