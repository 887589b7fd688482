"""Geometric kernels of the sampling and grouping stages.

All functions are deterministic and operate on ``(N, 3)`` float64 arrays.
Index-producing work (farthest point sampling, ball query, kNN) is delegated
to :mod:`pointcal.kernels`, which provides a numba and a numpy path.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CloudFormatError, CountError, DegenerateCloudError, DimensionError


@dataclass(frozen=True)
class NeighborhoodIndex:
    """Neighborhoods of ``m`` centroids, ``K`` slots each.

    Padded slots (``pad_mask`` true) repeat the row's first real neighbor.
    """

    centroid_ids: np.ndarray
    neighbor_ids: np.ndarray
    pad_mask: np.ndarray

    @property
    def m(self) -> int:
        return self.neighbor_ids.shape[0]

    @property
    def k(self) -> int:
        return self.neighbor_ids.shape[1]


def as_cloud(points) -> np.ndarray:
    p = np.ascontiguousarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise DimensionError(f"a point cloud is an (N, 3) array, got shape {p.shape}")
    if not np.isfinite(p).all():
        raise DegenerateCloudError("point cloud contains non-finite coordinates")
    return p


def normalize_unit_sphere(points) -> np.ndarray:
    """Center on the mean and scale so the farthest point has norm 1."""
    p = as_cloud(points)
    if p.shape[0] == 0:
        raise CountError("cannot normalize an empty cloud")
    centered = p - p.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    if radius == 0.0:
        raise DegenerateCloudError("all points coincide; the cloud has no extent")
    return centered / radius


def farthest_point_sampling(points, m: int, seed_index: int = 0) -> np.ndarray:
    p = as_cloud(points)
    n = p.shape[0]
    if not 1 <= m <= n:
        raise CountError(f"cannot sample {m} centroids from {n} points")
    if not 0 <= seed_index < n:
        raise CountError(f"seed index {seed_index} outside a cloud of {n} points")
    return kernels.fps(p, int(m), int(seed_index))


def ball_query(points, centroid_ids, radius: float, k: int) -> NeighborhoodIndex:
    p = as_cloud(points)
    cid = np.ascontiguousarray(centroid_ids, dtype=np.int64).reshape(-1)
    if cid.size == 0:
        raise CountError("ball query needs at least one centroid")
    if radius <= 0 or k < 1:
        raise ValueError(f"ball query needs radius > 0 and K >= 1 (got {radius}, {k})")
    if cid.min() < 0 or cid.max() >= p.shape[0]:
        raise IndexError("centroid index out of range")
    ids, pad = kernels.ball_query(p, cid, float(radius), int(k))
    return NeighborhoodIndex(cid, ids, pad)


def knn(points, centroid_ids, k: int) -> NeighborhoodIndex:
    p = as_cloud(points)
    cid = np.ascontiguousarray(centroid_ids, dtype=np.int64).reshape(-1)
    if not 1 <= k <= p.shape[0]:
        raise CountError(f"k={k} must lie in [1, {p.shape[0]}]")
    if cid.size == 0:
        raise CountError("kNN needs at least one centroid")
    ids = kernels.knn(p, cid, int(k))
    return NeighborhoodIndex(cid, ids, np.zeros(ids.shape, dtype=bool))


def relative_coordinates(points, idx: NeighborhoodIndex) -> np.ndarray:
    """``(m, K, 3)`` neighbor coordinates minus their centroid's coordinates."""
    p = as_cloud(points)
    return p[idx.neighbor_ids] - p[idx.centroid_ids][:, None, :]


def group_features(points, features, idx: NeighborhoodIndex) -> np.ndarray:
    """Assemble the ``(m, K, 3 + C)`` input of the shared per-point map.

    ``features`` may be ``None`` for the first layer, in which case only the
    relative coordinates are returned.
    """
    p = as_cloud(points)
    n = p.shape[0]
    if idx.neighbor_ids.size and (idx.neighbor_ids.max() >= n or idx.neighbor_ids.min() < 0):
        raise IndexError("neighbor index out of range")
    if idx.centroid_ids.max() >= n or idx.centroid_ids.min() < 0:
        raise IndexError("centroid index out of range")
    rel = relative_coordinates(p, idx)
    if features is None:
        return rel
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != n:
        raise DimensionError(f"features {f.shape} do not match a cloud of {n} points")
    return np.concatenate([rel, f[idx.neighbor_ids]], axis=2)


def read_cloud(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        fields = line.split()
        if len(fields) != 3:
            raise CloudFormatError(f"{path}:{lineno}: expected 3 fields, found {len(fields)}")
        try:
            rows.append([float(v) for v in fields])
        except ValueError as exc:
            raise CloudFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise CloudFormatError(f"{path}: no points")
    return as_cloud(np.array(rows))


def write_cloud(path, points) -> None:
    p = as_cloud(points)
    # repr-precision so clouds round-trip exactly
    text = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in p.tolist())
    Path(path).write_text(text)
