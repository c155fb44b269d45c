"""Residual convolutional encoder with a configurable stage plan.

The default plan is a desk-scale network (4 stages of basic blocks, widths
16/32/64/128).  ``BackboneConfig.resnet50()`` gives the full bottleneck plan.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import tensor as T
from ..tensor import DimensionError, Tensor
from .layers import BatchNorm2d, Conv2d, Module


@dataclass
class BackboneConfig:
    in_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64, 128)
    blocks: tuple[int, ...] = (2, 2, 2, 2)
    block: str = "basic"

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ValueError("widths and blocks must describe the same non-empty stage list")
        if self.block not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block type {self.block!r}")

    @property
    def expansion(self) -> int:
        return 4 if self.block == "bottleneck" else 1

    @property
    def out_width(self) -> int:
        return self.widths[-1] * self.expansion

    @property
    def total_stride(self) -> int:
        # stem conv (2) * stem pool (2) * one stride-2 per stage after the first
        return 4 * 2 ** (len(self.widths) - 1)

    @classmethod
    def resnet50(cls, in_channels: int = 1) -> "BackboneConfig":
        return cls(in_channels, (64, 128, 256, 512), (3, 4, 6, 3), "bottleneck")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"], d["blocks"] = list(self.widths), list(self.blocks)
        return d


class BasicBlock(Module):
    def __init__(self, c_in, width, stride, rng, dtype):
        self.conv1 = Conv2d(c_in, width, 3, rng, stride, dtype=dtype)
        self.bn1 = BatchNorm2d(width, dtype)
        self.conv2 = Conv2d(width, width, 3, rng, 1, dtype=dtype)
        self.bn2 = BatchNorm2d(width, dtype)
        self.shortcut = None
        if stride != 1 or c_in != width:
            self.shortcut = Conv2d(c_in, width, 1, rng, stride, padding=0, dtype=dtype)
            self.shortcut_bn = BatchNorm2d(width, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return T.relu(T.add(h, skip))


class Bottleneck(Module):
    def __init__(self, c_in, width, stride, rng, dtype):
        out = width * 4
        self.conv1 = Conv2d(c_in, width, 1, rng, 1, padding=0, dtype=dtype)
        self.bn1 = BatchNorm2d(width, dtype)
        self.conv2 = Conv2d(width, width, 3, rng, stride, dtype=dtype)
        self.bn2 = BatchNorm2d(width, dtype)
        self.conv3 = Conv2d(width, out, 1, rng, 1, padding=0, dtype=dtype)
        self.bn3 = BatchNorm2d(out, dtype)
        self.shortcut = None
        if stride != 1 or c_in != out:
            self.shortcut = Conv2d(c_in, out, 1, rng, stride, padding=0, dtype=dtype)
            self.shortcut_bn = BatchNorm2d(out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = T.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        skip = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return T.relu(T.add(h, skip))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        w0 = cfg.widths[0]
        self.stem = Conv2d(cfg.in_channels, w0, 7, rng, stride=2, padding=3, dtype=dtype)
        self.stem_bn = BatchNorm2d(w0, dtype)
        block = Bottleneck if cfg.block == "bottleneck" else BasicBlock
        blocks = []
        c_in = w0
        for s, (width, count) in enumerate(zip(cfg.widths, cfg.blocks)):
            for b in range(count):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(block(c_in, width, stride, rng, dtype))
                c_in = width * cfg.expansion
        self.blocks = blocks

    def check_input(self, shape) -> None:
        if len(shape) != 4:
            raise DimensionError("backbone expects B×C×H×W images")
        _, c, h, w = shape
        if c != self.cfg.in_channels:
            raise DimensionError(f"backbone stem takes {self.cfg.in_channels} channel(s), got {c}")
        s = self.cfg.total_stride
        if h % s or w % s:
            raise DimensionError(f"image extents {h}×{w} are not divisible by the total stride {s}")

    def __call__(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        h = T.relu(self.stem_bn(self.stem(x)))
        h = T.maxpool2d(h, 3, 2, padding=1)
        for blk in self.blocks:
            h = blk(h)
        return h
