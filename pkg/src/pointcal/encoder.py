"""Hierarchical single-scale-grouping encoder with recalibration and task heads.

A forward pass runs, per encoder layer: farthest point sampling, ball query,
a shared per-point MLP over ``[relative xyz, neighbor features]``, max pooling
within each neighborhood, then the configured recalibration block. The last
layer's descriptors are max-pooled into a global descriptor that feeds a
fully connected head; neither the pooled descriptor nor the head is ever
recalibrated.

Geometry does not depend on the weights, so :func:`build_plan` computes the
sampling and grouping once per cloud and training reuses it across epochs.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import geometry
from . import tensor as T
from .errors import CheckpointError, ConfigError, UnsupportedModeError
from .recalibration import (
    ChannelRecalibParams,
    RecalibMode,
    SpatialRecalibParams,
    channel_gates,
    glorot_uniform,
    recalib_param_count,
    spatial_gates,
)
from .tensor import Tensor

HEADS = ("classify", "risk")
PLACEMENTS = ("last", "all")


def _strict(cls_name: str, data: dict, allowed) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {cls_name} keys: {unknown}")


@dataclass
class SetAbstractionConfig:
    n_centroids: int
    radius: float
    k: int
    mlp_widths: list[int]

    def __post_init__(self):
        if self.n_centroids < 1:
            raise ConfigError("n_centroids must be >= 1")
        if not self.radius > 0:
            raise ConfigError("radius must be > 0")
        if self.k < 1:
            raise ConfigError("K must be >= 1")
        if not self.mlp_widths or min(self.mlp_widths) < 1:
            raise ConfigError("mlp_widths must be a non-empty list of positive widths")
        self.mlp_widths = [int(w) for w in self.mlp_widths]

    @property
    def out_channels(self) -> int:
        return self.mlp_widths[-1]

    @classmethod
    def from_dict(cls, d: dict) -> "SetAbstractionConfig":
        _strict("layer", d, ("n_centroids", "radius", "k", "mlp_widths"))
        try:
            return cls(int(d["n_centroids"]), float(d["radius"]), int(d["k"]), list(d["mlp_widths"]))
        except KeyError as exc:
            raise ConfigError(f"layer config missing {exc}") from None


@dataclass
class ModelConfig:
    layers: list[SetAbstractionConfig] = field(default_factory=lambda: [
        SetAbstractionConfig(64, 0.4, 32, [16, 32]),
        SetAbstractionConfig(16, 0.8, 16, [32, 64]),
    ])
    recalib_mode: RecalibMode = RecalibMode.NONE
    spatial_placement: str = "last"
    head: str = "classify"
    n_classes: int = 3
    fc_widths: list[int] = field(default_factory=lambda: [32])
    r: int = 2
    fps_seed: int = 0

    def __post_init__(self):
        self.recalib_mode = RecalibMode.parse(self.recalib_mode)
        if not self.layers:
            raise ConfigError("at least one encoder layer is required")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.n_centroids > prev.n_centroids:
                raise ConfigError("each layer must keep at most as many centroids as it receives")
        if self.spatial_placement not in PLACEMENTS:
            raise ConfigError(f"spatial_placement must be one of {PLACEMENTS}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        if self.head == "classify" and self.n_classes < 2:
            raise ConfigError("a classification head needs at least 2 classes")
        if self.r < 1:
            raise ConfigError("reduction ratio r must be >= 1")

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.head == "classify" else 1

    def layer_modes(self) -> list[RecalibMode]:
        """Block applied after each encoder layer.

        With ``spatial_placement="last"`` the spatial part only follows the final
        layer; earlier layers keep the channel part (CRB) when the mode has one.
        """
        mode = self.recalib_mode
        last = len(self.layers) - 1
        out = []
        for i in range(len(self.layers)):
            if mode is RecalibMode.NONE or self.spatial_placement == "all" or i == last:
                out.append(mode)
            else:
                out.append(RecalibMode.CRB if mode.has_channel else RecalibMode.NONE)
        return out

    def with_mode(self, mode) -> "ModelConfig":
        d = self.to_dict()
        d["recalib_mode"] = RecalibMode.parse(mode).value
        return ModelConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recalib_mode"] = self.recalib_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        _strict("model", d, cls.__dataclass_fields__)
        d = dict(d)
        if "layers" in d:
            d["layers"] = [SetAbstractionConfig.from_dict(x) for x in d["layers"]]
        return cls(**d)


def miniature_config(mode=RecalibMode.NONE, head: str = "classify") -> ModelConfig:
    """Small network used for full-model gradient checks (32 input points)."""
    return ModelConfig(
        layers=[SetAbstractionConfig(16, 0.5, 4, [8, 8]), SetAbstractionConfig(8, 0.9, 4, [8, 8])],
        recalib_mode=mode, head=head, n_classes=3, fc_widths=[8], r=2,
    )


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelState:
    params: dict[str, Tensor]
    r: int = 2

    def channel_block(self, layer: int) -> ChannelRecalibParams:
        p = self.params
        return ChannelRecalibParams(p[f"sa{layer}.crb.w2_ch"], p[f"sa{layer}.crb.w1_ch"], self.r)

    def spatial_block(self, layer: int) -> SpatialRecalibParams:
        p = self.params
        return SpatialRecalibParams(p[f"sa{layer}.srb.w_conv"], p[f"sa{layer}.srb.w2_sp"],
                                    p[f"sa{layer}.srb.w1_sp"], self.r)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def copy(self) -> "ModelState":
        return ModelState({k: T.parameter(v.data.copy(), name=k) for k, v in self.params.items()}, self.r)


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / fan_in)
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in creation order."""
    shapes: dict[str, tuple[int, ...]] = {}
    in_ch = 3
    for li, (layer, mode) in enumerate(zip(cfg.layers, cfg.layer_modes())):
        width = in_ch
        for j, w in enumerate(layer.mlp_widths):
            shapes[f"sa{li}.mlp{j}.weight"] = (width, w)
            shapes[f"sa{li}.mlp{j}.bias"] = (1, w)
            width = w
        c, n = layer.out_channels, layer.n_centroids
        if mode.has_channel:
            h = math.ceil(c / cfg.r)
            shapes[f"sa{li}.crb.w2_ch"] = (c, h)
            shapes[f"sa{li}.crb.w1_ch"] = (h, c)
        if mode.has_spatial:
            h = math.ceil(n / cfg.r)
            shapes[f"sa{li}.srb.w_conv"] = (c, 1)
            shapes[f"sa{li}.srb.w2_sp"] = (n, h)
            shapes[f"sa{li}.srb.w1_sp"] = (h, n)
        in_ch = 3 + c
    width = cfg.layers[-1].out_channels
    for j, w in enumerate(cfg.fc_widths):
        shapes[f"head.fc{j}.weight"] = (width, w)
        shapes[f"head.fc{j}.bias"] = (1, w)
        width = w
    shapes["head.out.weight"] = (width, cfg.out_dim)
    shapes["head.out.bias"] = (1, cfg.out_dim)
    return shapes


def init_state(cfg: ModelConfig, seed: int = 0) -> ModelState:
    """Fresh parameters; each tensor draws from its own ``(seed, name)`` stream.

    Per-name streams make the weights a model shares with its baseline
    identical across recalibration modes for the same seed.
    """
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        if name.endswith(".bias"):
            value = np.zeros(shape)
        elif ".crb." in name or ".srb." in name:
            value = glorot_uniform(rng, *shape)
        else:
            value = _he_uniform(rng, *shape)
        params[name] = T.parameter(value, name=name)
    return ModelState(params, cfg.r)


def baseline_param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for n, s in param_shapes(cfg.with_mode("none")).items())


def total_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count: baseline plus every block's overhead."""
    extra = sum(recalib_param_count(layer.out_channels, layer.n_centroids, cfg.r, mode)
                for layer, mode in zip(cfg.layers, cfg.layer_modes()))
    return baseline_param_count(cfg) + extra


# ---------------------------------------------------------------------------
# forward pass


@dataclass(frozen=True)
class LayerPlan:
    points: np.ndarray  # cloud this layer samples from
    neighborhoods: geometry.NeighborhoodIndex
    relative: np.ndarray  # (m*K, 3)

    @property
    def centroids(self) -> np.ndarray:
        return self.points[self.neighborhoods.centroid_ids]


def build_plan(points, cfg: ModelConfig) -> list[LayerPlan]:
    plan = []
    p = geometry.as_cloud(points)
    for layer in cfg.layers:
        cid = geometry.farthest_point_sampling(p, layer.n_centroids, cfg.fps_seed)
        idx = geometry.ball_query(p, cid, layer.radius, layer.k)
        rel = geometry.relative_coordinates(p, idx).reshape(-1, 3)
        plan.append(LayerPlan(p, idx, rel))
        p = p[cid]
    return plan


def shared_mlp(x: Tensor, state: ModelState, layer: int, depth: int) -> Tensor:
    for j in range(depth):
        w = state.params[f"sa{layer}.mlp{j}.weight"]
        b = state.params[f"sa{layer}.mlp{j}.bias"]
        x = T.relu(T.add_bias(T.matmul(x, w), b))
    return x


def set_abstraction(points, features: Tensor | None, cfg: SetAbstractionConfig, state: ModelState,
                    layer: int, fps_seed: int = 0,
                    plan: LayerPlan | None = None) -> tuple[np.ndarray, Tensor]:
    """Sample, group and pool one encoder layer; returns (centroid coordinates, F')."""
    if plan is None:
        p = geometry.as_cloud(points)
        cid = geometry.farthest_point_sampling(p, cfg.n_centroids, fps_seed)
        idx = geometry.ball_query(p, cid, cfg.radius, cfg.k)
        plan = LayerPlan(p, idx, geometry.relative_coordinates(p, idx).reshape(-1, 3))
    x = Tensor(plan.relative)
    if features is not None:
        x = T.concat_columns(x, T.gather_rows(features, plan.neighborhoods.neighbor_ids))
    x = shared_mlp(x, state, layer, len(cfg.mlp_widths))
    return plan.centroids, T.max_over_group(x, groups=plan.neighborhoods.m)


def recalibrate_layer(f: Tensor, mode: RecalibMode, state: ModelState, layer: int,
                      tap: dict | None = None) -> Tensor:
    if mode is RecalibMode.NONE:
        return f
    branches = []
    if mode.has_channel:
        g = channel_gates(f, state.channel_block(layer))
        branches.append(T.scale_columns(f, g))
        if tap is not None:
            tap["channel"] = g.data.copy()
    if mode.has_spatial:
        g = spatial_gates(f, state.spatial_block(layer))
        branches.append(T.scale_rows(f, g))
        if tap is not None:
            tap["spatial"] = g.data.copy()
    if len(branches) == 2:
        return T.elementwise_max(branches[0], branches[1])
    return branches[0]


def encoder_forward(points, cfg: ModelConfig, state: ModelState,
                    plan: list[LayerPlan] | None = None) -> tuple[Tensor, list[dict]]:
    """Global ``1 x C`` descriptor plus one tap record per encoder layer."""
    if plan is None:
        plan = build_plan(points, cfg)
    features = None
    taps = []
    for li, (layer, mode, lp) in enumerate(zip(cfg.layers, cfg.layer_modes(), plan)):
        centroids, f = set_abstraction(lp.points, features, layer, state, li, cfg.fps_seed, lp)
        tap: dict[str, Any] = {"mode": mode.value, "centroids": centroids, "features": f.data.copy()}
        features = recalibrate_layer(f, mode, state, li, tap)
        taps.append(tap)
    return T.max_over_group(features), taps


def _head(g: Tensor, cfg: ModelConfig, state: ModelState) -> Tensor:
    h = g
    for j in range(len(cfg.fc_widths)):
        h = T.relu(T.add_bias(T.matmul(h, state.params[f"head.fc{j}.weight"]),
                              state.params[f"head.fc{j}.bias"]))
    return T.add_bias(T.matmul(h, state.params["head.out.weight"]), state.params["head.out.bias"])


def classify_head(g: Tensor, cfg: ModelConfig, state: ModelState) -> Tensor:
    if cfg.head != "classify":
        raise ConfigError("model was configured with a risk head")
    return _head(g, cfg, state)


def risk_head(g: Tensor, cfg: ModelConfig, state: ModelState) -> Tensor:
    if cfg.head != "risk":
        raise ConfigError("model was configured with a classification head")
    return _head(g, cfg, state)


def forward(points, cfg: ModelConfig, state: ModelState,
            plan: list[LayerPlan] | None = None) -> Tensor:
    """Logits (``1 x K``) or risk (``1 x 1``) for one cloud."""
    g, _ = encoder_forward(points, cfg, state, plan)
    return _head(g, cfg, state)


def spatial_layer(cfg: ModelConfig, layer: int | None = None) -> int:
    candidates = [i for i, m in enumerate(cfg.layer_modes()) if m.has_spatial]
    if not candidates:
        raise UnsupportedModeError(
            f"activation export needs a spatial block; mode is {cfg.recalib_mode.value!r}")
    if layer is None:
        return candidates[-1]
    if layer not in candidates:
        raise UnsupportedModeError(f"layer {layer} carries no spatial block (have {candidates})")
    return layer


def export_activations(points, cfg: ModelConfig, state: ModelState,
                       layer: int | None = None) -> np.ndarray:
    """``(m, 4)`` rows of centroid ``x, y, z`` and its spatial gate."""
    li = spatial_layer(cfg, layer)
    _, taps = encoder_forward(points, cfg, state)
    tap = taps[li]
    return np.column_stack([tap["centroids"], tap["spatial"][:, 0]])


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
# manifest, then each tensor's float64 little-endian payload in table order.

MAGIC = b"PCALCKPT"


def save_checkpoint(path, cfg: ModelConfig, state: ModelState, extra: dict | None = None) -> None:
    table = []
    offset = 0
    for name, t in state.params.items():
        nbytes = t.size * 8
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    manifest = {"format": 1, "config": cfg.to_dict(), "extra": extra or {}, "tensors": table}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in state.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelConfig, ModelState, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16:16 + mlen].decode())
        cfg = ModelConfig.from_dict(manifest["config"])
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    expected = param_shapes(cfg)
    names = [e["name"] for e in manifest["tensors"]]
    if names != list(expected):
        raise CheckpointError(f"{path}: tensor table does not match the model config")
    payload = memoryview(raw)[16 + mlen:]
    params = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        if shape != expected[entry["name"]]:
            raise CheckpointError(f"{path}: {entry['name']} has shape {shape}, "
                                  f"config expects {expected[entry['name']]}")
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(payload) or entry["nbytes"] != 8 * math.prod(shape):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        data = np.frombuffer(payload[start:stop], dtype="<f8").reshape(shape)
        params[entry["name"]] = T.parameter(data.astype(np.float64), name=entry["name"])
    return cfg, ModelState(params, cfg.r), manifest.get("extra", {})
