"""Hot numeric kernels, each with a numba loop body and a numpy twin.

The ``*_loops`` functions are written as plain loops for ``numba.njit``; the
``*_numpy`` functions express the same computation with array operations.
Public names at the bottom of the module dispatch on
:data:`pointcal._accel.USE_NUMBA`.

All distances are squared Euclidean distances accumulated as
``dx*dx + dy*dy + dz*dz`` in that order, so both paths agree bit for bit.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit


def _fps_loops(points, m, seed_index):
    n = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = seed_index
    for t in range(m):
        out[t] = cur
        cx = points[cur, 0]
        cy = points[cur, 1]
        cz = points[cur, 2]
        best = -1.0
        best_i = 0
        for i in range(n):
            dx = points[i, 0] - cx
            dy = points[i, 1] - cy
            dz = points[i, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d
            # strict '>' keeps the lowest index on ties
            if mind[i] > best:
                best = mind[i]
                best_i = i
        cur = best_i
    return out


def _fps_numpy(points, m, seed_index):
    n = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = seed_index
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    for t in range(m):
        out[t] = cur
        dx = x - points[cur, 0]
        dy = y - points[cur, 1]
        dz = z - points[cur, 2]
        np.minimum(mind, dx * dx + dy * dy + dz * dz, out=mind)
        cur = int(np.argmax(mind))
    return out


def _sqdist_numpy(points, centroid_ids):
    c = points[centroid_ids]
    dx = points[None, :, 0] - c[:, None, 0]
    dy = points[None, :, 1] - c[:, None, 1]
    dz = points[None, :, 2] - c[:, None, 2]
    return dx * dx + dy * dy + dz * dz


def _ball_query_loops(points, centroid_ids, radius, k):
    n = points.shape[0]
    m = centroid_ids.shape[0]
    r2 = radius * radius
    ids = np.empty((m, k), dtype=np.int64)
    pad = np.ones((m, k), dtype=np.bool_)
    for c in range(m):
        ci = centroid_ids[c]
        cx = points[ci, 0]
        cy = points[ci, 1]
        cz = points[ci, 2]
        cnt = 0
        for i in range(n):
            dx = points[i, 0] - cx
            dy = points[i, 1] - cy
            dz = points[i, 2] - cz
            if dx * dx + dy * dy + dz * dz <= r2:
                ids[c, cnt] = i
                pad[c, cnt] = False
                cnt += 1
                if cnt == k:
                    break
        if cnt == 0:
            ids[c, 0] = ci
            pad[c, 0] = False
            cnt = 1
        for s in range(cnt, k):
            ids[c, s] = ids[c, 0]
    return ids, pad


def _ball_query_numpy(points, centroid_ids, radius, k):
    n = points.shape[0]
    m = centroid_ids.shape[0]
    inside = _sqdist_numpy(points, centroid_ids) <= radius * radius
    # a stable sort on "outside" lists qualifying indices first, in index order
    order = np.argsort(~inside, axis=1, kind="stable")[:, :k]
    counts = np.minimum(inside.sum(axis=1), k)
    empty = counts == 0
    order[empty, 0] = centroid_ids[empty]
    counts[empty] = 1
    slot = np.arange(min(k, n))[None, :]
    pad_small = slot >= counts[:, None]
    ids = np.empty((m, k), dtype=np.int64)
    pad = np.ones((m, k), dtype=np.bool_)
    ids[:, : order.shape[1]] = np.where(pad_small, order[:, :1], order)
    pad[:, : order.shape[1]] = pad_small
    ids[:, order.shape[1]:] = order[:, :1]
    return ids, pad


def _knn_loops(points, centroid_ids, k):
    # keep the k best in a sorted buffer; scanning in index order and
    # inserting after equal distances makes ties resolve to the lower index
    n = points.shape[0]
    m = centroid_ids.shape[0]
    ids = np.empty((m, k), dtype=np.int64)
    best = np.empty(k)
    for c in range(m):
        ci = centroid_ids[c]
        filled = 0
        for i in range(n):
            dx = points[i, 0] - points[ci, 0]
            dy = points[i, 1] - points[ci, 1]
            dz = points[i, 2] - points[ci, 2]
            d = dx * dx + dy * dy + dz * dz
            if filled == k and d >= best[k - 1]:
                continue
            j = filled if filled < k else k - 1
            while j > 0 and best[j - 1] > d:
                best[j] = best[j - 1]
                ids[c, j] = ids[c, j - 1]
                j -= 1
            best[j] = d
            ids[c, j] = i
            if filled < k:
                filled += 1
    return ids


def _knn_numpy(points, centroid_ids, k):
    return np.argsort(_sqdist_numpy(points, centroid_ids), axis=1, kind="stable")[:, :k]


def _scatter_add_rows_loops(target, idx, values):
    for r in range(idx.shape[0]):
        t = idx[r]
        for j in range(values.shape[1]):
            target[t, j] += values[r, j]
    return target


def _scatter_add_rows_numpy(target, idx, values):
    np.add.at(target, idx, values)
    return target


def _concordance_loops(risks, times, events):
    n = risks.shape[0]
    num = 0.0
    den = 0
    for i in range(n):
        if not events[i]:
            continue
        for j in range(n):
            if times[i] < times[j]:
                den += 1
                if risks[i] > risks[j]:
                    num += 1.0
                elif risks[i] == risks[j]:
                    num += 0.5
    return num, den


def _concordance_numpy(risks, times, events):
    comparable = events[:, None] & (times[:, None] < times[None, :])
    higher = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    num = float(np.count_nonzero(comparable & higher)) + 0.5 * np.count_nonzero(comparable & tied)
    return num, int(np.count_nonzero(comparable))


fps_numba = njit(_fps_loops)
ball_query_numba = njit(_ball_query_loops)
knn_numba = njit(_knn_loops)
scatter_add_rows_numba = njit(_scatter_add_rows_loops)
concordance_numba = njit(_concordance_loops)

if USE_NUMBA:
    fps = fps_numba
    ball_query = ball_query_numba
    knn = knn_numba
    scatter_add_rows = scatter_add_rows_numba
    concordance = concordance_numba
else:
    fps = _fps_numpy
    ball_query = _ball_query_numpy
    knn = _knn_numpy
    scatter_add_rows = _scatter_add_rows_numpy
    concordance = _concordance_numpy

BACKENDS = {
    "numba": {
        "fps": fps_numba,
        "ball_query": ball_query_numba,
        "knn": knn_numba,
        "scatter_add_rows": scatter_add_rows_numba,
        "concordance": concordance_numba,
    },
    "numpy": {
        "fps": _fps_numpy,
        "ball_query": _ball_query_numpy,
        "knn": _knn_numpy,
        "scatter_add_rows": _scatter_add_rows_numpy,
        "concordance": _concordance_numpy,
    },
}
