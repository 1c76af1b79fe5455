"""Convolutional pyramid encoder with the four-level stride-4..32 contract."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nn import ConvBnRelu, Module, ResidualBlock
from .tensor import Tensor

FULL_CHANNELS = (64, 128, 320, 512)
DESK_CHANNELS = (16, 32, 48, 64)


class ConfigError(ValueError):
    pass


class FeaturePyramid(NamedTuple):
    x1: Tensor
    x2: Tensor
    x3: Tensor
    x4: Tensor


@dataclass
class EncoderConfig:
    channels: tuple = DESK_CHANNELS
    blocks: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4:
            raise ConfigError(f"encoder needs exactly 4 stages, got {len(self.channels)}")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"encoder channels must be strictly increasing: {self.channels}")
        if self.blocks < 1:
            raise ConfigError(f"blocks per stage must be >= 1, got {self.blocks}")


def check_input_size(h: int, w: int) -> None:
    if h % 32 or w % 32:
        raise ConfigError(f"input size {h}x{w} is not divisible by 32")


class Encoder(Module):
    """Stride-2 stem, then four stages of (stride-2 Conv-BN-ReLU + residual blocks).

    Stage i output has ``channels[i]`` maps at 1/2^(i+1) of the input size.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.channels
        self.stem = ConvBnRelu(3, c[0], rng, stride=2)
        stages = []
        prev = c[0]
        for ch in c:
            stage = _Stage(prev, ch, cfg.blocks, rng)
            stages.append(stage)
            prev = ch
        self.stages = stages

    def forward(self, image: Tensor) -> FeaturePyramid:
        check_input_size(*image.shape[-2:])
        x = self.stem(image)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats)


class _Stage(Module):
    def __init__(self, cin: int, cout: int, blocks: int, rng):
        self.down = ConvBnRelu(cin, cout, rng, stride=2)
        self.blocks = [ResidualBlock(cout, cout, rng) for _ in range(blocks - 1)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.down(x)
        for blk in self.blocks:
            x = blk(x)
        return x


def pyramid_shapes(n: int, h: int, w: int, channels=DESK_CHANNELS) -> list[tuple]:
    """Expected (N, C_i, H/2^(i+1), W/2^(i+1)) for i = 1..4."""
    return [(n, c, h // 2 ** (i + 1), w // 2 ** (i + 1)) for i, c in enumerate(channels, start=1)]
