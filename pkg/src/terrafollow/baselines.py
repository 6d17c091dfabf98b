"""Comparison methods: RANSAC plane segmentation and KNN / quadratic terrain models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import Degenerate, RankDeficient, TooFewPoints
from .preprocessing import GridPartition
from .rng import Stream

_S_RANSAC = 7


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 50
    distance_threshold: float = 0.15
    patch_resolution: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.distance_threshold > 0.0:
            raise ValueError("distance_threshold must be > 0")
        if not self.patch_resolution > 0.0:
            raise ValueError("patch_resolution must be > 0")


def _triple_planes(p: np.ndarray, triples: np.ndarray):
    a, b, c = p[triples[:, 0]], p[triples[:, 1]], p[triples[:, 2]]
    n = np.cross(b - a, c - a)
    norm = np.linalg.norm(n, axis=1)
    scale = np.maximum(np.linalg.norm(b - a, axis=1) * np.linalg.norm(c - a, axis=1), 1e-300)
    ok = norm > 1e-12 * scale
    n = n / np.where(ok, norm, 1.0)[:, None]
    d = -np.einsum("ij,ij->i", n, a)
    return n, d, ok


def ransac_single(points, params: RansacParams, stream: int = 0) -> np.ndarray:
    """Indices of the inliers of the best-consensus plane over random minimal triples.

    Ties between equally supported planes go to the earliest sample. ``stream``
    separates the random sequences of independent calls under one seed.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    n_pts = len(p)
    if n_pts < 3:
        raise Degenerate(f"RANSAC needs at least 3 points, got {n_pts}")
    rng = Stream(params.seed, _S_RANSAC, stream)
    # three distinct indices per iteration: i, then offsets that skip earlier picks
    i = rng.integers(n_pts, params.iterations)
    j = rng.integers(n_pts - 1, params.iterations)
    k = rng.integers(n_pts - 2, params.iterations)
    j = j + (j >= i)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    k = k + (k >= lo)
    k = k + (k >= hi)
    normals, d, ok = _triple_planes(p, np.stack([i, j, k], axis=1))
    if not ok.any():
        raise Degenerate("every sampled triple was collinear")
    dist = np.abs(p @ normals[ok].T + d[ok])
    support = (dist < params.distance_threshold).sum(axis=0)
    best = int(np.argmax(support))
    return np.flatnonzero(dist[:, best] < params.distance_threshold)


def ransac_patch(partition: GridPartition, params: RansacParams) -> np.ndarray:
    """Per-cell RANSAC over the grid; cells below 3 points (or degenerate) contribute nothing."""
    xyz = partition.points.xyz
    out = []
    for c in range(len(partition)):
        idx = partition.cell_indices(c)
        if len(idx) < 3:
            continue
        try:
            out.append(idx[ransac_single(xyz[idx], params, stream=c)])
        except Degenerate:
            continue
    return np.sort(np.concatenate(out)) if out else np.zeros(0, dtype=np.int64)


class KnnTerrain:
    """Inverse-distance-weighted mean of the k nearest control heights."""

    def __init__(self, xy, h, k: int = 4, power: float = 2.0):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        h = np.asarray(h, dtype=float).ravel()
        if len(xy) < k:
            raise TooFewPoints(f"KNN needs at least k={k} control points, got {len(xy)}")
        self.k, self.power = int(k), float(power)
        self.h = h
        self.tree = cKDTree(xy)

    def query(self, x: float, y: float) -> float:
        dist, idx = self.tree.query((x, y), k=self.k)
        if dist[0] == 0.0:
            return float(self.h[idx[0]])
        w = dist ** -self.power
        return float(w @ self.h[idx] / w.sum())

    def query_batch(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        q = np.stack([x.ravel(), np.asarray(y, dtype=float).ravel()], axis=1)
        dist, idx = self.tree.query(q, k=self.k)
        dist, idx = dist.reshape(len(q), -1), idx.reshape(len(q), -1)
        exact = dist[:, 0] == 0.0
        with np.errstate(divide="ignore"):
            w = np.where(exact[:, None], 0.0, dist ** -self.power)
        w[exact, 0] = 1.0
        return ((w * self.h[idx]).sum(axis=1) / w.sum(axis=1)).reshape(x.shape)


class PolyTerrain:
    """Least-squares quadratic z = c0 + c1 x + c2 y + c3 x^2 + c4 xy + c5 y^2."""

    def __init__(self, xy, h):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        h = np.asarray(h, dtype=float).ravel()
        if len(xy) < 6:
            raise TooFewPoints(f"quadratic fit needs at least 6 points, got {len(xy)}")
        A = self.design(xy[:, 0], xy[:, 1])
        coef, _, rank, _ = np.linalg.lstsq(A, h, rcond=None)
        if rank < 6:
            raise RankDeficient("control points do not determine a quadratic (collinear or repeated xy)")
        self.coef = coef
        self._c = coef.tolist()

    @staticmethod
    def design(x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.stack([np.ones_like(x), x, y, x * x, x * y, y * y], axis=-1)

    def query(self, x: float, y: float) -> float:
        c0, c1, c2, c3, c4, c5 = self._c
        return c0 + x * (c1 + c3 * x + c4 * y) + y * (c2 + c5 * y)

    def query_batch(self, x, y) -> np.ndarray:
        return self.design(x, y) @ self.coef


def _control_arrays(control_points):
    pts = list(control_points)
    xy = np.array([(p.x, p.y) for p in pts], dtype=float).reshape(-1, 2)
    h = np.array([p.h for p in pts], dtype=float)
    return xy, h


def knn_terrain(control_points, k: int = 4, power: float = 2.0) -> KnnTerrain:
    xy, h = _control_arrays(control_points)
    return KnnTerrain(xy, h, k, power)


def poly_terrain(control_points) -> PolyTerrain:
    xy, h = _control_arrays(control_points)
    return PolyTerrain(xy, h)
