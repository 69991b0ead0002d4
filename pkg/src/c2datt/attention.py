"""SE, frequency-wise SE and C2D channel-frequency attention.

All three take a feature map ``x`` of shape (N, C, F, T), compute weights in
(0, 1) from a time-pooled summary and return ``(x * w, w)``; ``w`` is
(N, C) for SE, (N, F) for fwSE and (N, C, F) for C2D.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import functional as F
from .autograd.nn import BatchNorm2d, Module, Parameter, kaiming_normal
from .autograd.tensor import Tensor

VARIANTS = ("none", "se", "fwse", "c2d")
POOLINGS = ("avg", "std")


@dataclass(frozen=True)
class AttentionConfig:
    variant: str = "c2d"
    pooling: str = "avg"
    se_reduction: int = 8      # SE bottleneck d = C // se_reduction
    fwse_bottleneck: int = 16
    c2d_kernel: int = 3
    c2d_channels: int = 8

    def errors(self) -> list[str]:
        errs = []
        if self.variant not in VARIANTS:
            errs.append(f"attention must be one of {', '.join(VARIANTS)}")
        if self.pooling not in POOLINGS:
            errs.append(f"pooling must be one of {', '.join(POOLINGS)}")
        if self.c2d_kernel < 1 or self.c2d_kernel % 2 == 0:
            errs.append("c2d_kernel must be a positive odd integer")
        if min(self.se_reduction, self.fwse_bottleneck, self.c2d_channels) < 1:
            errs.append("bottleneck sizes must be >= 1")
        return errs

    def se_bottleneck(self, channels: int) -> int:
        return max(1, channels // self.se_reduction)


def time_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Collapse the last (time) axis by mean or population std."""
    if mode == "avg":
        return x.mean(axis=-1)
    if mode == "std":
        if x.shape[-1] < 2:
            raise ValueError("std pooling needs at least two frames")
        return F.reduce_moments(x, -1)[1]
    raise ValueError(f"unknown pooling mode {mode!r}")


def _pool(x: Tensor, axes: tuple[int, ...], mode: str) -> Tensor:
    if mode == "avg":
        return x.mean(axis=axes)
    if mode == "std":
        return F.reduce_moments(x, axes)[1]
    raise ValueError(f"unknown pooling mode {mode!r}")


class SEAttention(Module):
    """Channel attention from statistics over the F x T plane."""

    def __init__(self, channels: int, bottleneck: int, pooling: str = "avg",
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.pooling = pooling
        self.fc1 = Parameter(kaiming_normal(rng, (bottleneck, channels), channels))
        self.fc2 = Parameter(kaiming_normal(rng, (channels, bottleneck), bottleneck))

    def weights(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.fc1.shape[1]:
            raise ValueError(f"SE expects {self.fc1.shape[1]} channels, got {x.shape[1]}")
        s = _pool(x, (2, 3), self.pooling)
        return F.sigmoid(F.relu(s @ self.fc1.T) @ self.fc2.T)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        w = self.weights(x)
        return x * w.reshape(w.shape + (1, 1)), w


class FwSEAttention(Module):
    """SE with frequency in place of channel: statistics over C x T."""

    def __init__(self, bins: int, bottleneck: int, pooling: str = "avg",
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.pooling = pooling
        self.fc1 = Parameter(kaiming_normal(rng, (bottleneck, bins), bins))
        self.fc2 = Parameter(kaiming_normal(rng, (bins, bottleneck), bottleneck))

    def weights(self, x: Tensor) -> Tensor:
        if x.shape[2] != self.fc1.shape[1]:
            raise ValueError(f"fwSE expects {self.fc1.shape[1]} frequency bins, got {x.shape[2]}")
        s = _pool(x, (1, 3), self.pooling)
        return F.sigmoid(F.relu(s @ self.fc1.T) @ self.fc2.T)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        w = self.weights(x)
        n, f = w.shape
        return x * w.reshape(n, 1, f, 1), w


class C2DAttention(Module):
    """Two stacked k x k convolutions over the time-pooled channel x frequency plane.

    The pooled map enters as a one-channel image with channels as height and
    frequency as width.  Neither convolution has a bias.
    """

    def __init__(self, kernel: int = 3, mid_channels: int = 8, pooling: str = "avg",
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.pooling = pooling
        self.padding = (kernel - 1) // 2
        self.conv1 = Parameter(kaiming_normal(rng, (mid_channels, 1, kernel, kernel), kernel * kernel))
        self.bn = BatchNorm2d(mid_channels)
        self.conv2 = Parameter(kaiming_normal(rng, (1, mid_channels, kernel, kernel),
                                              mid_channels * kernel * kernel))

    def weights(self, x: Tensor) -> Tensor:
        n, c, f, _ = x.shape
        z = time_pool(x, self.pooling).reshape(n, 1, c, f)
        h = F.conv2d(z, self.conv1, padding=self.padding)
        h = F.relu(self.bn(h))
        return F.sigmoid(F.conv2d(h, self.conv2, padding=self.padding)).reshape(n, c, f)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        w = self.weights(x)
        return x * w.reshape(w.shape + (1,)), w


def build_attention(cfg: AttentionConfig, channels: int, bins: int,
                    rng: np.random.Generator | None = None) -> Module | None:
    if cfg.variant == "none":
        return None
    if cfg.variant == "se":
        return SEAttention(channels, cfg.se_bottleneck(channels), cfg.pooling, rng)
    if cfg.variant == "fwse":
        return FwSEAttention(bins, cfg.fwse_bottleneck, cfg.pooling, rng)
    if cfg.variant == "c2d":
        return C2DAttention(cfg.c2d_kernel, cfg.c2d_channels, cfg.pooling, rng)
    raise ValueError(f"unknown attention variant {cfg.variant!r}")


def attention_param_count(cfg: AttentionConfig, channels: int, bins: int) -> int:
    """Weight-only parameter count of one attention module (no biases, no BN affine)."""
    if cfg.variant == "none":
        return 0
    if cfg.variant == "se":
        return 2 * channels * cfg.se_bottleneck(channels)
    if cfg.variant == "fwse":
        return 2 * bins * cfg.fwse_bottleneck
    if cfg.variant == "c2d":
        return 2 * cfg.c2d_kernel ** 2 * cfg.c2d_channels
    raise ValueError(f"unknown attention variant {cfg.variant!r}")
