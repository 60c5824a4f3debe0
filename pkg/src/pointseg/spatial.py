"""Spatial search primitives: kNN with a radius cap, farthest point
sampling, ball-query grouping, and inverse-distance interpolation.

Queries go through a uniform voxel grid (cell edge = search radius) when the
input is large enough to benefit; small inputs and uncapped searches fall
back to exhaustive scans. Both paths compute squared distances with the
same expression and break ties by lower point index, so results are
identical either way.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, DegenerateInput

_GRID_MIN_POINTS = 64  # exhaustive scan below this


class NeighborList(NamedTuple):
    indices: np.ndarray   # (m, k) int64
    sq_dists: np.ndarray  # (m, k) non-decreasing per row


class GroupingResult(NamedTuple):
    centroids: np.ndarray  # (s,) indices into the point set
    members: np.ndarray    # (s, g) indices, centroid-padded


def _as_xyz(arr, name):
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2 or out.shape[1] != 3:
        raise DegenerateInput(f"{name} must be (n, 3), got {out.shape}")
    return out


class VoxelGrid:
    """Hash of cell coordinate -> ascending point indices, cell edge = radius."""

    def __init__(self, points, cell: float):
        if not (np.isfinite(cell) and cell > 0):
            raise ContractViolation(f"voxel cell must be positive and finite, got {cell}")
        self.points = points
        self.cell = cell
        self.table: dict[tuple, list] = {}
        keys = np.floor(points / cell).astype(np.int64)
        for i, key in enumerate(map(tuple, keys)):
            self.table.setdefault(key, []).append(i)

    def candidates(self, p) -> np.ndarray:
        """Ascending indices of all points in the 27 cells around p.

        Contains every point within `cell` of p by construction.
        """
        cx, cy, cz = np.floor(p / self.cell).astype(np.int64)
        found = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    hit = self.table.get((cx + dx, cy + dy, cz + dz))
                    if hit:
                        found.extend(hit)
        return np.sort(np.asarray(found, dtype=np.int64))


def _select_k(order, d2_sorted, r2, k):
    """First k qualifying entries of one pre-sorted row, nearest-padded."""
    qual = int((d2_sorted <= r2).sum())  # sorted, so qualifiers are a prefix
    take = min(max(qual, 1), k)          # nothing qualifies -> global nearest
    idx = np.empty(k, dtype=np.int64)
    d2 = np.empty(k, dtype=np.float64)
    idx[:take] = order[:take]
    d2[:take] = d2_sorted[:take]
    idx[take:] = order[0]
    d2[take:] = d2_sorted[0]
    return idx, d2


def knn(points, queries, k: int, max_radius: float = np.inf) -> NeighborList:
    """k nearest neighbors per query, ties to lower index.

    Neighbors beyond max_radius are excluded; short lists are padded by
    repeating the nearest entry (the global nearest if nothing qualifies).
    """
    points = _as_xyz(points, "points")
    queries = _as_xyz(queries, "queries")
    if k < 1:
        raise ContractViolation(f"knn requires k >= 1, got {k}")
    n, m = points.shape[0], queries.shape[0]
    r2 = max_radius * max_radius
    out_idx = np.empty((m, k), dtype=np.int64)
    out_d2 = np.empty((m, k), dtype=np.float64)

    grid = None
    if np.isfinite(max_radius) and n >= _GRID_MIN_POINTS:
        grid = VoxelGrid(points, float(max_radius))

    if grid is None:
        for start in range(0, m, 512):
            q = queries[start:start + 512]
            d2 = ((q[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
            order = np.argsort(d2, axis=1, kind="stable")
            d2s = np.take_along_axis(d2, order, axis=1)
            for r in range(q.shape[0]):
                out_idx[start + r], out_d2[start + r] = _select_k(order[r], d2s[r], r2, k)
        return NeighborList(out_idx, out_d2)

    for qi in range(m):
        cand = grid.candidates(queries[qi])
        if cand.size:
            d2 = ((points[cand] - queries[qi]) ** 2).sum(axis=-1)
            order = np.argsort(d2, kind="stable")
            if d2[order[0]] <= r2:
                out_idx[qi], out_d2[qi] = _select_k(cand[order], d2[order], r2, k)
                continue
        # nothing within the radius: global nearest, full scan
        d2 = ((points - queries[qi]) ** 2).sum(axis=-1)
        j = int(d2.argmin())
        out_idx[qi] = j
        out_d2[qi] = d2[j]
    return NeighborList(out_idx, out_d2)


def farthest_point_sample(points, count: int, seed=None) -> np.ndarray:
    """Greedy farthest point sampling.

    Starts at index 0 (or a seeded random index when `seed` is given); each
    pick maximizes the minimum distance to the chosen set, ties to lower
    index. Returns indices in selection order.
    """
    points = _as_xyz(points, "points")
    n = points.shape[0]
    if count > n:
        raise ContractViolation(f"cannot sample {count} from {n} points")
    if count < 1:
        raise ContractViolation(f"sample count must be >= 1, got {count}")
    start = 0 if seed is None else int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = start
    mind = ((points - points[start]) ** 2).sum(axis=-1)
    for i in range(1, count):
        nxt = int(mind.argmax())  # argmax takes the first max: lowest index on ties
        chosen[i] = nxt
        mind = np.minimum(mind, ((points - points[nxt]) ** 2).sum(axis=-1))
    return chosen


def ball_group(points, centroids, radius: float, group_size: int) -> GroupingResult:
    """Up to group_size points within radius of each centroid.

    Scan order is ascending point index; short groups are padded by
    repeating the centroid's own index.
    """
    points = _as_xyz(points, "points")
    centroids = np.asarray(centroids, dtype=np.int64)
    if not radius > 0:
        raise ContractViolation(f"ball_group radius must be positive, got {radius}")
    if group_size < 1:
        raise ContractViolation(f"group_size must be >= 1, got {group_size}")
    n = points.shape[0]
    r2 = radius * radius
    members = np.empty((centroids.shape[0], group_size), dtype=np.int64)

    grid = None
    if np.isfinite(radius) and n >= _GRID_MIN_POINTS:
        grid = VoxelGrid(points, float(radius))

    for s, ci in enumerate(centroids):
        center = points[ci]
        cand = grid.candidates(center) if grid is not None else np.arange(n)
        d2 = ((points[cand] - center) ** 2).sum(axis=-1)
        hits = cand[d2 <= r2][:group_size]
        members[s, :hits.size] = hits
        members[s, hits.size:] = ci
    return GroupingResult(centroids, members)


def interpolation_plan(coarse_xyz, fine_xyz):
    """Indices and normalized inverse-squared-distance weights of the 3
    nearest coarse points per fine point (all of them when fewer than 3
    exist). Weights sum to 1 per row."""
    coarse_xyz = _as_xyz(coarse_xyz, "coarse_xyz")
    if coarse_xyz.shape[0] < 1:
        raise DegenerateInput("interpolation needs at least one coarse point")
    m = min(3, coarse_xyz.shape[0])
    nl = knn(coarse_xyz, fine_xyz, m)
    w = 1.0 / (nl.sq_dists + 1e-8)
    w = w / w.sum(axis=1, keepdims=True)
    return nl.indices, w


def interpolate_features(coarse_xyz, coarse_feat, fine_xyz) -> np.ndarray:
    """Upsample coarse features to fine positions (see interpolation_plan)."""
    coarse_feat = np.asarray(coarse_feat, dtype=np.float64)
    idx, w = interpolation_plan(coarse_xyz, fine_xyz)
    return np.einsum("im,imc->ic", w, coarse_feat[idx])
