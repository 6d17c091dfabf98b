"""Terrain control points and the tensor-product B-spline height surface.

Control points sit at cell centres with a lower-quantile height. The surface
is evaluated parametrically: x(t) = sum_i B_i(t) x_i and z = sum B_i B_j h_ij
on clamped uniform knots, so a query at (x, y) first inverts the coordinate
maps. Because the centres are equally spaced this keeps the usual clamped
construction while reproducing affine height lattices exactly, including the
boundary spans where clamped knots bunch up.
"""

from __future__ import annotations

import math
from fractions import Fraction
from bisect import bisect_right
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Optional

import numpy as np

from .errors import EmptyLattice


@dataclass(frozen=True)
class UpdateParams:
    rho: float = 0.2
    tau_c: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if not self.tau_c >= 0.0:
            raise ValueError("tau_c must be >= 0")


@dataclass(frozen=True)
class ControlPoint:
    u: int
    v: int
    x: float
    y: float
    h: float
    last_update_frame: int = 0


def quantile_index(n: int, rho: float) -> int:
    """0-based floor(rho * n), clamped to [0, n - 1]."""
    if n < 1:
        raise ValueError("empty height set")
    return min(max(int(math.floor(rho * n)), 0), n - 1)


def quantile_height(z, rho: float) -> float:
    z = np.sort(np.asarray(z, dtype=float).ravel())
    return float(z[quantile_index(len(z), rho)])


def cell_center(u: int, v: int, s: float) -> tuple[float, float]:
    return ((u + 0.5) * s, (v + 0.5) * s)


def make_control_points(
    ground_cells: Mapping,
    s: float,
    rho: float,
    frame: int = 0,
    gradients: Optional[Mapping] = None,
) -> list[ControlPoint]:
    """One control point per non-empty ground set.

    Values of ``ground_cells`` are height vectors or (n, 3) point arrays. When
    ``gradients[(u, v)] = (dz/dx, dz/dy)`` is given for a point array, each
    height is first carried to the cell centre along that gradient, so a
    planar cell yields its exact centre height.
    """
    out = []
    for (u, v), pts in ground_cells.items():
        arr = np.asarray(pts, dtype=float)
        x, y = cell_center(u, v, s)
        if arr.ndim == 2:
            z = arr[:, 2]
            g = None if gradients is None else gradients.get((u, v))
            if g is not None:
                z = z - g[0] * (arr[:, 0] - x) - g[1] * (arr[:, 1] - y)
        else:
            z = arr
        if len(z) == 0:
            continue
        out.append(ControlPoint(int(u), int(v), x, y, quantile_height(z, rho), frame))
    return out


@dataclass(frozen=True, eq=False)
class ControlLattice:
    s: float
    points: Mapping = field(default_factory=dict)  # (u, v) -> ControlPoint

    def __len__(self):
        return len(self.points)

    @classmethod
    def from_points(cls, s: float, points) -> "ControlLattice":
        return cls(float(s), {(p.u, p.v): p for p in points})

    @property
    def bounds(self) -> tuple[int, int, int, int]:
        """(u_min, u_max, v_min, v_max)."""
        if not self.points:
            raise EmptyLattice("lattice has no control points")
        uv = np.array(list(self.points.keys()))
        return int(uv[:, 0].min()), int(uv[:, 0].max()), int(uv[:, 1].min()), int(uv[:, 1].max())

    def height_grid(self) -> tuple[np.ndarray, int, int]:
        """Heights on the bounding rectangle (NaN where unobserved) and its origin (u_min, v_min)."""
        u0, u1, v0, v1 = self.bounds
        H = np.full((u1 - u0 + 1, v1 - v0 + 1), np.nan)
        for (u, v), p in self.points.items():
            H[u - u0, v - v0] = p.h
        return H, u0, v0

    def height(self, u: int, v: int) -> Optional[float]:
        p = self.points.get((u, v))
        return None if p is None else p.h

    def lines(self) -> list[str]:
        """Export records ``u v x y h`` in (u, v) order."""
        return [f"{p.u} {p.v} {p.x!r} {p.y!r} {p.h!r}" for _, p in sorted(self.points.items())]


def incremental_update(lattice: ControlLattice, new_points, tau_c: float):
    """Conservative update; returns ``(new lattice, changed cells)``.

    A new height replaces the stored one only when the cell has no history or
    the two differ by more than ``tau_c``.
    """
    pts = dict(lattice.points)
    changed = set()
    for p in new_points:
        old = pts.get((p.u, p.v))
        if old is None or abs(p.h - old.h) > tau_c:
            pts[(p.u, p.v)] = p
            changed.add((p.u, p.v))
    if not changed:
        return lattice, changed
    return ControlLattice(lattice.s, pts), changed


def fill_holes(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fill NaNs with the nearest valid entry (index distance, ties to the lowest height)."""
    H = np.array(H, dtype=float)
    holes = np.isnan(H)
    if not holes.any():
        return H, holes
    valid = np.argwhere(~holes)
    if len(valid) == 0:
        raise EmptyLattice("lattice has no valid heights")
    vh = H[~holes]
    order = np.lexsort((vh,))  # lowest height first so argmin picks it on ties
    valid, vh = valid[order], vh[order]
    hole_idx = np.argwhere(holes)
    for a in range(0, len(hole_idx), 512):
        chunk = hole_idx[a : a + 512]
        d2 = ((chunk[:, None, :] - valid[None, :, :]) ** 2).sum(axis=2)
        H[tuple(chunk.T)] = vh[np.argmin(d2, axis=1)]
    return H, holes


def _cox_de_boor(knots: np.ndarray, p: int, i: int, t: float) -> float:
    """Reference basis value B_{i,p}(t) by the recursive definition (right-closed at the end)."""
    if p == 0:
        last = knots[-1]
        if knots[i] <= t < knots[i + 1] or (t == last and knots[i] < knots[i + 1] == last):
            return 1
        return 0
    out = 0
    den = knots[i + p] - knots[i]
    if den > 0:
        out += (t - knots[i]) / den * _cox_de_boor(knots, p - 1, i, t)
    den = knots[i + p + 1] - knots[i + 1]
    if den > 0:
        out += (knots[i + p + 1] - t) / den * _cox_de_boor(knots, p - 1, i + 1, t)
    return out


def clamped_knots(n: int, p: int, exact: bool = False):
    """Clamped knot vector on [0, 1] with uniform interior spacing."""
    spans = n - p
    knots = [Fraction(0)] * (p + 1) + [Fraction(i, spans) for i in range(1, spans)] + [Fraction(1)] * (p + 1)
    return knots if exact else np.array([float(k) for k in knots])


def _span_matrices(n: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-span power-basis matrices M and index-map coefficients G, in exact arithmetic."""
    spans = n - p
    P = p + 1
    M = np.zeros((spans, P, P))
    G = np.zeros((spans, P))
    if p == 0:
        M[:, 0, 0] = 1.0
        return M, G
    # knots in units of one span; a span's matrix depends only on its local knot pattern
    K = [0] * (p + 1) + list(range(1, spans)) + [spans] * (p + 1)
    for j in range(spans):
        base = K[p + j]
        Mj = _local_span_matrix(tuple(k - base for k in K[j : j + 2 * p + 2]), p)
        M[j] = np.array(Mj, dtype=float)
        G[j] = [float(sum(Mj[r][c] * (j + c) for c in range(P))) for r in range(P)]
    return M, G


@lru_cache(maxsize=None)
def _local_span_matrix(pattern: tuple, p: int):
    """Exact power-basis matrix of the p + 1 functions active on [pattern[p], pattern[p + 1]]."""
    knots = [Fraction(k) for k in pattern]
    a, b = knots[p], knots[p + 1]
    taus = [Fraction(r, p) for r in range(p + 1)]
    vals = [[_cox_de_boor(knots, p, c, a + t * (b - a)) for c in range(p + 1)] for t in taus]
    return tuple(tuple(row) for row in _solve_vandermonde(taus, vals))


def _solve_vandermonde(taus, vals):
    """Gauss-Jordan on the exact Vandermonde system V X = vals."""
    P = len(taus)
    A = [[t**r for r in range(P)] + list(row) for t, row in zip(taus, vals)]
    for col in range(P):
        piv = next(r for r in range(col, P) if A[r][col] != 0)
        A[col], A[piv] = A[piv], A[col]
        inv = 1 / A[col][col]
        A[col] = [x * inv for x in A[col]]
        for r in range(P):
            if r != col and A[r][col] != 0:
                f = A[r][col]
                A[r] = [x - f * y for x, y in zip(A[r], A[col])]
    return [row[P:] for row in A]


class BSplineAxis:
    """One axis: n equally spaced control coordinates, degree p = min(k, n - 1).

    Span j covers knots[p + j] .. knots[p + j + 1] with active basis functions
    j .. j + p; ``M[j]`` maps local powers (1, tau, ..., tau^p) to their values.
    ``g`` is the control-index map sum_i i B_i(t) in the same power form.
    """

    def __init__(self, n: int, k: int):
        if n < 1:
            raise EmptyLattice("axis without control points")
        p = min(int(k), n - 1)
        self.n, self.p = n, p
        self.knots = clamped_knots(n, p)
        self.n_spans = n - p
        P = p + 1
        self.M, self.G = _span_matrices(n, p)
        self.breaks = self.G[:, 0].copy()
        self._breaks_list = self.breaks.tolist()
        # spans whose index map is affine can be inverted in closed form
        self.linear = np.all(self.G[:, 2:] == 0.0, axis=1) if P > 2 else np.ones(self.n_spans, dtype=bool)
        self._G_list = self.G.tolist()
        self._linear_list = self.linear.tolist()
        # cell centres sit at integer q; tabulate them
        table = [self.locate(float(q)) for q in range(n)]
        self._int_j = np.array([t[0] for t in table], dtype=np.int64)
        self._int_tau = np.array([t[1] for t in table])

    def locate(self, q: float) -> tuple[int, float]:
        """Span and local parameter for control-index coordinate q in [0, n - 1]."""
        if self.p == 0:
            return 0, 0.0
        j = bisect_right(self._breaks_list, q) - 1
        j = min(max(j, 0), self.n_spans - 1)
        c = self._G_list[j]
        if self._linear_list[j]:
            tau = (q - c[0]) / c[1]
        else:
            tau = _invert_poly(c, q)
        return j, min(max(tau, 0.0), 1.0)

    def locate_batch(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(q, dtype=float)
        if self.p == 0:
            return np.zeros(q.shape, dtype=np.int64), np.zeros(q.shape)
        j = np.clip(np.searchsorted(self.breaks, q, side="right") - 1, 0, self.n_spans - 1)
        c = self.G[j]
        tau = (q - c[:, 0]) / c[:, 1]
        nl = ~self.linear[j]
        if nl.any():
            qi = np.rint(q)
            hit = (qi == q) & (qi >= 0) & (qi <= self.n - 1)
            if hit.any():
                k = qi[hit].astype(np.int64)
                j[hit] = self._int_j[k]
                tau[hit] = self._int_tau[k]
                nl &= ~hit
            idx = np.flatnonzero(nl)
            if len(idx):
                tau[idx] = _invert_poly_batch(c[idx], q[idx])
        return j, np.clip(tau, 0.0, 1.0)

    def basis(self, j: int, tau: float) -> np.ndarray:
        return np.vander([tau], self.p + 1, increasing=True)[0] @ self.M[j]


def _powers(tau: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows (1, tau, ..., tau^p) and their derivatives."""
    T = np.vander(tau, p + 1, increasing=True)
    dT = np.zeros_like(T)
    dT[:, 1:] = T[:, :-1] * np.arange(1, p + 1)
    return T, dT


def _invert_poly(c, q: float) -> float:
    """Solve sum_r c[r] tau^r = q on [0, 1] for a monotone increasing polynomial."""
    lo, hi = 0.0, 1.0
    f0 = c[0]
    f1 = sum(c)
    tau = (q - f0) / (f1 - f0) if f1 > f0 else 0.0
    for _ in range(60):
        f = 0.0
        df = 0.0
        for r in range(len(c) - 1, -1, -1):
            df = df * tau + f
            f = f * tau + c[r]
        f -= q
        if f > 0.0:
            hi = tau
        else:
            lo = tau
        step = f / df if df > 0.0 else math.inf
        nxt = tau - step
        if not lo <= nxt <= hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - tau) <= 1e-12:
            return nxt
        tau = nxt
    return tau


def _invert_poly_batch(c: np.ndarray, q: np.ndarray) -> np.ndarray:
    lo = np.zeros(len(q))
    hi = np.ones(len(q))
    f0 = c[:, 0]
    f1 = c.sum(axis=1)
    span = f1 - f0
    tau = np.where(span > 0.0, (q - f0) / np.where(span > 0.0, span, 1.0), 0.0)
    for _ in range(60):
        f = np.zeros(len(q))
        df = np.zeros(len(q))
        for r in range(c.shape[1] - 1, -1, -1):
            df = df * tau + f
            f = f * tau + c[:, r]
        f -= q
        hi = np.where(f > 0.0, tau, hi)
        lo = np.where(f > 0.0, lo, tau)
        with np.errstate(divide="ignore", invalid="ignore"):
            nxt = tau - f / df
        bad = ~((nxt >= lo) & (nxt <= hi))
        nxt = np.where(bad, 0.5 * (lo + hi), nxt)
        done = np.abs(nxt - tau) <= 1e-12
        tau = nxt
        if done.all():
            break
    return tau


@lru_cache(maxsize=64)
def _axis(n: int, k: int) -> BSplineAxis:
    return BSplineAxis(n, k)


class TerrainSurface:
    """Immutable fitted surface; safe to query from any number of readers."""

    def __init__(self, lattice: ControlLattice, k_x: int = 3, k_y: int = 3):
        H, u0, v0 = lattice.height_grid()
        H, filled = fill_holes(H)
        self.lattice = lattice
        self.s = lattice.s
        self.u0, self.v0 = u0, v0
        self.H = H
        self.filled = filled
        self.ax = _axis(H.shape[0], int(k_x))
        self.ay = _axis(H.shape[1], int(k_y))
        self.x0 = (u0 + 0.5) * self.s
        self.y0 = (v0 + 0.5) * self.s
        self.domain = (self.x0, self.x0 + (H.shape[0] - 1) * self.s, self.y0, self.y0 + (H.shape[1] - 1) * self.s)
        px, py = self.ax.p + 1, self.ay.p + 1
        # per-patch power-basis coefficients C[jx, jy] = M_x H_sub M_y^T
        sub = np.lib.stride_tricks.sliding_window_view(H, (px, py))
        self.C = np.einsum("iar,ijrs,jbs->ijab", self.ax.M, sub, self.ay.M)
        self._C_list = self.C.tolist()
        self._inv_s = 1.0 / self.s

    @property
    def degrees(self) -> tuple[int, int]:
        return self.ax.p, self.ay.p

    def _coords(self, x: float, y: float):
        xmin, xmax, ymin, ymax = self.domain
        xc = min(max(x, xmin), xmax)
        yc = min(max(y, ymin), ymax)
        return xc, yc, (xc != x) or (yc != y)

    def query(self, x: float, y: float) -> tuple[float, bool]:
        """Height at (x, y) and whether the point was clamped into the domain."""
        xc, yc, extrap = self._coords(float(x), float(y))
        jx, tx = self.ax.locate((xc - self.x0) * self._inv_s)
        jy, ty = self.ay.locate((yc - self.y0) * self._inv_s)
        C = self._C_list[jx][jy]
        z = 0.0
        for row in reversed(C):
            acc = 0.0
            for c in reversed(row):
                acc = acc * ty + c
            z = z * tx + acc
        return z, extrap

    def query_batch(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xmin, xmax, ymin, ymax = self.domain
        xc = np.clip(x, xmin, xmax)
        yc = np.clip(y, ymin, ymax)
        extrap = (xc != x) | (yc != y)
        jx, tx = self.ax.locate_batch((xc - self.x0) * self._inv_s)
        jy, ty = self.ay.locate_batch((yc - self.y0) * self._inv_s)
        C = self.C[jx.ravel(), jy.ravel()]
        tx, ty = tx.ravel(), ty.ravel()
        z = np.zeros(len(tx))
        for a in range(C.shape[1] - 1, -1, -1):
            row = np.zeros(len(tx))
            for b in range(C.shape[2] - 1, -1, -1):
                row = row * ty + C[:, a, b]
            z = z * tx + row
        return z.reshape(x.shape), extrap

    def gradient_batch(self, x, y) -> np.ndarray:
        """(n, 2) surface gradient dz/dx, dz/dy at the (clamped) query points."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        xmin, xmax, ymin, ymax = self.domain
        jx, tx = self.ax.locate_batch((np.clip(x, xmin, xmax) - self.x0) * self._inv_s)
        jy, ty = self.ay.locate_batch((np.clip(y, ymin, ymax) - self.y0) * self._inv_s)
        C = self.C[jx, jy]
        Tx, dTx = _powers(tx, self.ax.p)
        Ty, dTy = _powers(ty, self.ay.p)
        out = np.zeros((len(x), 2))
        if self.ax.p > 0:
            # chain rule through the index map q(tau): dx = s dq
            dz = np.einsum("na,nab,nb->n", dTx, C, Ty)
            out[:, 0] = dz / (self.s * np.einsum("na,na->n", dTx, self.ax.G[jx]))
        if self.ay.p > 0:
            dz = np.einsum("na,nab,nb->n", Tx, C, dTy)
            out[:, 1] = dz / (self.s * np.einsum("na,na->n", dTy, self.ay.G[jy]))
        return out

    def weights(self, x: float, y: float) -> tuple[np.ndarray, np.ndarray]:
        """Lattice indices (relative to the rectangle origin) and basis weights used at (x, y)."""
        xc, yc, _ = self._coords(float(x), float(y))
        jx, tx = self.ax.locate((xc - self.x0) * self._inv_s)
        jy, ty = self.ay.locate((yc - self.y0) * self._inv_s)
        bx = self.ax.basis(jx, tx)
        by = self.ay.basis(jy, ty)
        ii, jj = np.meshgrid(jx + np.arange(len(bx)), jy + np.arange(len(by)), indexing="ij")
        return np.stack([ii.ravel(), jj.ravel()], axis=1), np.outer(bx, by).ravel()

    def supported_mask(self, x, y) -> np.ndarray:
        """True where every control point in the query's support was observed (not hole-filled)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xmin, xmax, ymin, ymax = self.domain
        inside = (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)
        jx, _ = self.ax.locate_batch((np.clip(x, xmin, xmax) - self.x0) * self._inv_s)
        jy, _ = self.ay.locate_batch((np.clip(y, ymin, ymax) - self.y0) * self._inv_s)
        px, py = self.ax.p + 1, self.ay.p + 1
        bad = np.lib.stride_tricks.sliding_window_view(self.filled, (px, py)).any(axis=(2, 3))
        return inside & ~bad[jx, jy]

    def dense_grid(self, step: float) -> np.ndarray:
        """(n, 3) samples ``x y z`` on a regular grid over the domain."""
        if not step > 0.0:
            raise ValueError("sampling step must be positive")
        xmin, xmax, ymin, ymax = self.domain
        xs = np.arange(xmin, xmax + 0.5 * step, step)
        ys = np.arange(ymin, ymax + 0.5 * step, step)
        X, Y = np.meshgrid(np.minimum(xs, xmax), np.minimum(ys, ymax), indexing="ij")
        Z, _ = self.query_batch(X.ravel(), Y.ravel())
        return np.stack([X.ravel(), Y.ravel(), Z], axis=1)


def fit_surface(lattice: ControlLattice, k_x: int = 3, k_y: int = 3) -> TerrainSurface:
    if len(lattice) == 0:
        raise EmptyLattice("cannot fit a surface to an empty lattice")
    return TerrainSurface(lattice, k_x, k_y)


def query_height(surface: TerrainSurface, x: float, y: float) -> tuple[float, bool]:
    return surface.query(x, y)


def altitude_command(surface: TerrainSurface, x_q: float, y_q: float, h_ref: float) -> tuple[float, bool]:
    """z_cmd = z_terr + h_ref, with the extrapolation flag of the terrain query."""
    if not h_ref > 0.0:
        raise ValueError("h_ref must be positive")
    z, extrap = surface.query(x_q, y_q)
    return z + h_ref, extrap


def dense_grid_lines(surface: TerrainSurface, step: float) -> list[str]:
    return [f"{x!r} {y!r} {z!r}" for x, y, z in surface.dense_grid(step).tolist()]
