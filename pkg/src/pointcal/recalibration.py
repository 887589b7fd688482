"""Channel (CRB), spatial (SRB) and concurrent spatial-channel (SCRB) recalibration.

Each block maps an ``N x C`` feature matrix to a gated matrix of the same
shape. Features are stored row-per-point, so the gate networks use row
vectors: the channel path is ``z @ W2_ch -> relu -> @ W1_ch`` and the
spatial path is ``q^T @ W2_sp -> relu -> @ W1_sp``. No bias terms are used.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, ShapeBindingError
from .tensor import Tensor


class RecalibMode(str, enum.Enum):
    NONE = "none"
    CRB = "crb"
    SRB = "srb"
    SCRB = "scrb"

    @classmethod
    def parse(cls, value) -> "RecalibMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown recalibration mode {value!r}; expected one of "
                             f"{[m.value for m in cls]}") from None

    @property
    def has_channel(self) -> bool:
        return self in (RecalibMode.CRB, RecalibMode.SCRB)

    @property
    def has_spatial(self) -> bool:
        return self in (RecalibMode.SRB, RecalibMode.SCRB)


def bottleneck(width: int, r: int) -> int:
    if width < 1 or r < 1:
        raise ValueError(f"width and reduction ratio must be positive (got {width}, {r})")
    return math.ceil(width / r)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


@dataclass
class ChannelRecalibParams:
    w2: Tensor  # C x ceil(C/r), applied first
    w1: Tensor  # ceil(C/r) x C
    r: int

    @property
    def channels(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def init(cls, channels: int, r: int, rng: np.random.Generator) -> "ChannelRecalibParams":
        h = bottleneck(channels, r)
        return cls(T.parameter(glorot_uniform(rng, channels, h)),
                   T.parameter(glorot_uniform(rng, h, channels)), r)

    @classmethod
    def zeros(cls, channels: int, r: int) -> "ChannelRecalibParams":
        h = bottleneck(channels, r)
        return cls(T.parameter(np.zeros((channels, h))), T.parameter(np.zeros((h, channels))), r)

    def tensors(self) -> dict[str, Tensor]:
        return {"w2_ch": self.w2, "w1_ch": self.w1}


@dataclass
class SpatialRecalibParams:
    w_conv: Tensor  # C x 1 width-1 projection
    w2: Tensor  # N x ceil(N/r), applied first
    w1: Tensor  # ceil(N/r) x N
    r: int

    @property
    def n_fixed(self) -> int:
        return self.w2.shape[0]

    @property
    def channels(self) -> int:
        return self.w_conv.shape[0]

    @classmethod
    def init(cls, channels: int, n_points: int, r: int,
             rng: np.random.Generator) -> "SpatialRecalibParams":
        h = bottleneck(n_points, r)
        return cls(T.parameter(glorot_uniform(rng, channels, 1)),
                   T.parameter(glorot_uniform(rng, n_points, h)),
                   T.parameter(glorot_uniform(rng, h, n_points)), r)

    @classmethod
    def zeros(cls, channels: int, n_points: int, r: int) -> "SpatialRecalibParams":
        h = bottleneck(n_points, r)
        return cls(T.parameter(np.zeros((channels, 1))), T.parameter(np.zeros((n_points, h))),
                   T.parameter(np.zeros((h, n_points))), r)

    def tensors(self) -> dict[str, Tensor]:
        return {"w_conv": self.w_conv, "w2_sp": self.w2, "w1_sp": self.w1}


def channel_gates(f: Tensor, p: ChannelRecalibParams) -> Tensor:
    """``1 x C`` sigmoid gates from the per-channel mean over all points."""
    if f.shape[1] != p.channels:
        raise DimensionError(f"CRB built for {p.channels} channels, features have shape {f.shape}")
    z = T.column_mean(f)
    hidden = T.relu(T.matmul(z, p.w2))
    return T.sigmoid(T.matmul(hidden, p.w1))


def spatial_gates(f: Tensor, p: SpatialRecalibParams) -> Tensor:
    """``N x 1`` sigmoid gates, one per point descriptor."""
    if f.shape[0] != p.n_fixed:
        raise ShapeBindingError(f"SRB is bound to N={p.n_fixed} points, features have {f.shape[0]} rows")
    if f.shape[1] != p.channels:
        raise DimensionError(f"SRB built for {p.channels} channels, features have shape {f.shape}")
    q = T.transpose(T.matmul(f, p.w_conv))  # 1 x N
    hidden = T.relu(T.matmul(q, p.w2))
    return T.transpose(T.sigmoid(T.matmul(hidden, p.w1)))


def channel_recalibrate(f: Tensor, p: ChannelRecalibParams) -> Tensor:
    return T.scale_columns(f, channel_gates(f, p))


def spatial_recalibrate(f: Tensor, p: SpatialRecalibParams) -> Tensor:
    return T.scale_rows(f, spatial_gates(f, p))


def spatial_channel_recalibrate(f: Tensor, p_ch: ChannelRecalibParams,
                                p_sp: SpatialRecalibParams) -> Tensor:
    # both branches read the same input; max-out picks per element
    return T.elementwise_max(channel_recalibrate(f, p_ch), spatial_recalibrate(f, p_sp))


def recalib_param_count(channels: int, n_points: int, r: int, mode) -> int:
    mode = RecalibMode.parse(mode)
    count = 0
    if mode.has_channel:
        count += 2 * channels * bottleneck(channels, r)
    if mode.has_spatial:
        count += channels + 2 * n_points * bottleneck(n_points, r)
    return count
