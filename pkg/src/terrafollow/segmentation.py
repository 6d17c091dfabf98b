"""Region-wise radar ground segmentation.

Per grid cell: prior-constrained seeds, PCA plane, point-to-plane
reselection, then a three-way gate (uprightness, agreement with the terrain
prior, height dispersion). Accepted cells may recover a second surface from
their residual points; rejected cells may recall points lying at or below
the prior height.

The functions operating on a single cell (``seed_init`` ... ``global_recall``)
are the reference definitions. ``segment_frame`` runs the same steps for all
cells at once with segmented numpy reductions and is what the pipeline uses;
``segment_frame_reference`` loops the per-cell functions and exists to check
it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import Degenerate, NoCandidates
from .preprocessing import GridPartition

# relative eigenvalue floor below which a point set counts as rank deficient
RANK_TOL = 1e-12
# normal components this small count as zero when fixing the sign
SIGN_TOL = 1e-12


@dataclass(frozen=True)
class SegParams:
    N_min: int = 5
    delta_lower: float = 0.5
    delta_upper: float = 0.5
    k: int = 5
    delta_seed: float = 0.2
    tau_d: float = 0.15
    T: int = 3
    theta_u: float = math.radians(30.0)
    tau_h: float = 0.5
    tau_s: float = 0.15
    delta_z: float = 0.3
    N_re: int = 5
    delta_h: float = 0.3
    # recall band depth below the prior; inf recalls everything beneath it
    delta_recall: float = 0.5
    # ablation switches: prior window for seeds (PSI), refinement stage (Ref)
    use_prior_seeds: bool = True
    use_refinement: bool = True

    def __post_init__(self):
        for name in ("delta_lower", "delta_upper", "delta_seed", "tau_d", "tau_h", "tau_s", "delta_z", "delta_h", "delta_recall"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be > 0")
        for name in ("N_min", "k", "T", "N_re"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.theta_u < math.pi / 2:
            raise ValueError("theta_u must lie in (0, pi/2)")


@dataclass(frozen=True, eq=False)
class PlaneEstimate:
    normal: np.ndarray
    d: float
    centroid: np.ndarray
    eigenvalues: Optional[np.ndarray] = None

    def distance(self, points) -> np.ndarray:
        """Signed point-to-plane distance."""
        return np.asarray(points, dtype=float) @ self.normal + self.d


@dataclass(eq=False)
class CellSegmentation:
    cell: tuple[int, int]
    ground: np.ndarray  # indices of G^(T) into the cell (or cloud) points
    plane: Optional[PlaneEstimate]
    mean_height: float
    dispersion: float
    verdict: bool
    uprightness: bool = False
    elevation: bool = False
    stability: bool = False
    too_few_points: bool = False
    degenerate: bool = False
    count_total: int = 0
    resegmented: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    recalled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def reasons(self) -> str:
        if self.too_few_points:
            return "too_few_points"
        if self.degenerate:
            return "degenerate"
        failed = [n for n in ("uprightness", "elevation", "stability") if not getattr(self, n)]
        return "+".join(failed) if failed else "accepted"

    @property
    def final_ground(self) -> np.ndarray:
        base = self.ground if self.verdict else np.zeros(0, dtype=np.int64)
        return np.union1d(np.union1d(base, self.resegmented), self.recalled).astype(np.int64)


class TerrainPrior:
    """Historical terrain height lookup; ``None``/NaN where nothing is known."""

    def __init__(self, query: Optional[Callable] = None):
        self._query = query

    @classmethod
    def absent(cls) -> "TerrainPrior":
        return cls(None)

    @classmethod
    def constant(cls, height: float) -> "TerrainPrior":
        return cls(lambda x, y: np.full(np.shape(x), float(height)))

    @property
    def present(self) -> bool:
        return self._query is not None

    def heights(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self._query is None:
            return np.full(x.shape, np.nan)
        return np.asarray(self._query(x, np.asarray(y, dtype=float)), dtype=float)

    def height_query(self, x: float, y: float) -> Optional[float]:
        h = float(self.heights(np.array([x]), np.array([y]))[0])
        return None if math.isnan(h) else h

    def cell_heights(self, keys, s: float) -> np.ndarray:
        """Prior at the cell centres ((u + 1/2) s, (v + 1/2) s)."""
        keys = np.asarray(keys, dtype=float).reshape(-1, 2)
        centers = (keys + 0.5) * s
        return self.heights(centers[:, 0], centers[:, 1])


def _opt(z_hist) -> Optional[float]:
    if z_hist is None:
        return None
    z = float(z_hist)
    return None if math.isnan(z) else z


# -- per-cell reference operations --------------------------------------------


def seed_init(cell_points, z_hist, params: SegParams) -> tuple[np.ndarray, float]:
    """Initial ground set G0 (indices into ``cell_points``) and z_init.

    Candidates are the points inside [z_hist - delta_lower, z_hist + delta_upper]
    (every point when there is no prior or prior seeds are disabled); the k
    lowest candidates (stable by height, then input order) are the seeds and
    G0 holds the candidates no higher than mean(seed z) + delta_seed.
    """
    z = np.asarray(cell_points, dtype=float).reshape(-1, 3)[:, 2]
    zh = _opt(z_hist) if params.use_prior_seeds else None
    if zh is None:
        cand = np.arange(len(z))
    else:
        cand = np.flatnonzero((z >= zh - params.delta_lower) & (z <= zh + params.delta_upper))
    if len(cand) == 0:
        raise NoCandidates("no points inside the prior height window")
    seeds = cand[np.argsort(z[cand], kind="stable")[: params.k]]
    z_init = float(np.mean(z[seeds]))
    g0 = cand[z[cand] <= z_init + params.delta_seed]
    return g0, z_init


def pca_plane(points) -> PlaneEstimate:
    """Least-variance plane through the centroid (population covariance)."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) < 3:
        raise Degenerate(f"need at least 3 points for a plane, got {len(p)}")
    centroid = p.mean(axis=0)
    r = p - centroid
    cov = (r.T @ r) / len(p)
    w, V = np.linalg.eigh(cov)
    if not w[2] > 0.0 or w[1] <= RANK_TOL * w[2]:
        raise Degenerate("points are collinear or coincident")
    n = _orient(V[:, 0])
    return PlaneEstimate(n, float(-n @ centroid), centroid, w)


def _orient(n: np.ndarray) -> np.ndarray:
    """Sign convention n_z >= 0; ties (|n_z| at round-off level) toward +x, then +y."""
    for i in (2, 0, 1):
        if abs(n[i]) > SIGN_TOL:
            return -n if n[i] < 0.0 else n
    return n


def refine_plane(cell_points, g0, params: SegParams):
    """Alternate PCA fitting and reselection |n.p + d| < tau_d.

    Returns ``(G, plane, iterations)``; stops early when a reselection leaves
    the set unchanged, otherwise after T reselections with the plane refit to
    the final set.
    """
    p = np.asarray(cell_points, dtype=float).reshape(-1, 3)
    g = np.asarray(g0, dtype=np.int64)
    for it in range(params.T):
        plane = pca_plane(p[g])
        g_new = np.flatnonzero(np.abs(plane.distance(p)) < params.tau_d)
        if np.array_equal(g_new, g):
            return g, plane, it + 1
        g = g_new
    return g, pca_plane(p[g]), params.T


def gate_cell(cell_points, ground, plane: PlaneEstimate, z_hist, params: SegParams, cell=(0, 0)) -> CellSegmentation:
    p = np.asarray(cell_points, dtype=float).reshape(-1, 3)
    g = np.asarray(ground, dtype=np.int64)
    zg = p[g, 2]
    zbar = float(np.mean(zg))
    sigma = float(np.sqrt(np.mean((zg - zbar) ** 2)))
    zh = _opt(z_hist)
    up = abs(float(plane.normal[2])) >= math.cos(params.theta_u)
    elev = True if zh is None else abs(zbar - zh) < params.tau_h
    stab = sigma < params.tau_s
    return CellSegmentation(
        cell=tuple(cell),
        ground=g,
        plane=plane,
        mean_height=zbar,
        dispersion=sigma,
        verdict=bool(up and elev and stab),
        uprightness=bool(up),
        elevation=bool(elev),
        stability=bool(stab),
        count_total=len(p),
    )


def local_resegment(cell_points, accepted: CellSegmentation, z_hist, params: SegParams) -> np.ndarray:
    """Second surface from the residual of an accepted cell (indices into the cell)."""
    p = np.asarray(cell_points, dtype=float).reshape(-1, 3)
    if not accepted.verdict:
        raise ValueError("local re-segmentation applies to accepted cells only")
    residual = np.setdiff1d(np.arange(len(p)), accepted.ground)
    if len(residual) <= params.N_re:
        return np.zeros(0, dtype=np.int64)
    if abs(float(np.mean(p[residual, 2])) - accepted.mean_height) >= params.delta_z:
        return np.zeros(0, dtype=np.int64)
    sub = p[residual]
    try:
        g0, _ = seed_init(sub, z_hist, params)
        g, plane, _ = refine_plane(sub, g0, params)
    except (NoCandidates, Degenerate):
        return np.zeros(0, dtype=np.int64)
    if len(g) == 0:
        return np.zeros(0, dtype=np.int64)
    again = gate_cell(sub, g, plane, z_hist, params, accepted.cell)
    return residual[g] if again.verdict else np.zeros(0, dtype=np.int64)


def recall_cell(cell_points, z_hist, params: SegParams) -> np.ndarray:
    zh = _opt(z_hist)
    if zh is None:
        return np.zeros(0, dtype=np.int64)
    z = np.asarray(cell_points, dtype=float).reshape(-1, 3)[:, 2]
    return np.flatnonzero((z <= zh + params.delta_h) & (z >= zh - params.delta_recall))


def global_recall(rejected_cells: Mapping, prior: TerrainPrior, params: SegParams, s: float) -> dict:
    """Map each rejected cell (u, v) -> indices of its points within [prior - delta_recall, prior + delta_h]."""
    if not prior.present:
        return {}
    out = {}
    for key, pts in rejected_cells.items():
        zh = prior.cell_heights([key], s)[0]
        out[key] = recall_cell(pts, zh, params)
    return out


def segment_cell(cell_points, z_hist, params: SegParams, cell=(0, 0)) -> CellSegmentation:
    """Full single-cell procedure; indices refer to ``cell_points``."""
    p = np.asarray(cell_points, dtype=float).reshape(-1, 3)
    empty = np.zeros(0, dtype=np.int64)
    if len(p) < params.N_min:
        seg = CellSegmentation(tuple(cell), empty, None, math.nan, math.nan, False, too_few_points=True, count_total=len(p))
    else:
        try:
            g0, _ = seed_init(p, z_hist, params)
            g, plane, _ = refine_plane(p, g0, params)
            if len(g) == 0:
                raise Degenerate("empty ground set")
            seg = gate_cell(p, g, plane, z_hist, params, cell)
        except (NoCandidates, Degenerate):
            seg = CellSegmentation(tuple(cell), empty, None, math.nan, math.nan, False, degenerate=True, count_total=len(p))
    if params.use_refinement:
        if seg.verdict:
            seg.resegmented = local_resegment(p, seg, z_hist, params)
        else:
            seg.recalled = recall_cell(p, z_hist, params)
    return seg


# -- whole-frame segmentation ---------------------------------------------------


@dataclass(eq=False)
class SegmentationResult:
    """Per-cell arrays (aligned with ``partition.keys``) plus the final ground mask."""

    partition: GridPartition
    ground: np.ndarray  # bool over partition.points
    z_hist: np.ndarray
    normal: np.ndarray
    d: np.ndarray
    centroid: np.ndarray
    mean_height: np.ndarray
    dispersion: np.ndarray
    uprightness: np.ndarray
    elevation: np.ndarray
    stability: np.ndarray
    too_few: np.ndarray
    degenerate: np.ndarray
    verdict: np.ndarray
    core: np.ndarray  # bool over points: G^(T) of every fitted cell
    initial: np.ndarray  # bool over points: G^(T) of accepted cells
    resegmented: np.ndarray  # bool over points
    recalled: np.ndarray  # bool over points

    @property
    def ground_indices(self) -> np.ndarray:
        return np.flatnonzero(self.ground)

    def ground_by_cell(self) -> dict[tuple[int, int], np.ndarray]:
        """(u, v) -> indices of final ground points, non-empty cells only."""
        part = self.partition
        out = {}
        g_sorted = self.ground[part.order]
        for c, (u, v) in enumerate(part.keys):
            a, b = part.starts[c], part.starts[c + 1]
            sel = g_sorted[a:b]
            if sel.any():
                out[(int(u), int(v))] = part.order[a:b][sel]
        return out

    def cells(self) -> dict[tuple[int, int], CellSegmentation]:
        part = self.partition
        out = {}
        reseg, recall = self.resegmented, self.recalled
        for c, (u, v) in enumerate(part.keys):
            idx = part.cell_indices(c)
            plane = None
            if not (self.too_few[c] or self.degenerate[c]):
                plane = PlaneEstimate(self.normal[c].copy(), float(self.d[c]), self.centroid[c].copy())
            out[(int(u), int(v))] = CellSegmentation(
                cell=(int(u), int(v)),
                ground=idx[self.core[idx]],
                plane=plane,
                mean_height=float(self.mean_height[c]),
                dispersion=float(self.dispersion[c]),
                verdict=bool(self.verdict[c]),
                uprightness=bool(self.uprightness[c]),
                elevation=bool(self.elevation[c]),
                stability=bool(self.stability[c]),
                too_few_points=bool(self.too_few[c]),
                degenerate=bool(self.degenerate[c]),
                count_total=len(idx),
                resegmented=idx[reseg[idx]],
                recalled=idx[recall[idx]],
            )
        return out

    def dump_lines(self) -> list[str]:
        """``u v n_x n_y n_z d zbar sigma phi reasons count_ground count_total`` per cell."""
        part = self.partition
        counts_total = part.counts
        counts_ground = np.bincount(part.cell_id[self.ground], minlength=len(part)) if len(part) else []
        lines = []
        for c, (u, v) in enumerate(part.keys):
            n = [float(v) for v in self.normal[c]]
            reasons = _reason_text(
                self.too_few[c], self.degenerate[c], self.uprightness[c], self.elevation[c], self.stability[c]
            )
            lines.append(
                f"{u} {v} {n[0]!r} {n[1]!r} {n[2]!r} {float(self.d[c])!r} {float(self.mean_height[c])!r} "
                f"{float(self.dispersion[c])!r} {int(self.verdict[c])} {reasons} {int(counts_ground[c])} {int(counts_total[c])}"
            )
        return lines


def _reason_text(too_few, degenerate, up, elev, stab) -> str:
    if too_few:
        return "too_few_points"
    if degenerate:
        return "degenerate"
    failed = [n for n, ok in (("uprightness", up), ("elevation", elev), ("stability", stab)) if not ok]
    return "+".join(failed) if failed else "accepted"


def _stable_argsort_int(key) -> np.ndarray:
    """Stable argsort of non-negative integers via unique composite keys."""
    n = len(key)
    return np.argsort(key.astype(np.int64) * n + np.arange(n), kind="quicksort")


class _Sorted:
    """Points of a partition ordered by (cell, height, input index).

    Every cell is non-empty and contiguous, so per-cell sums are one
    ``np.add.reduceat`` over the cell starts.
    """

    def __init__(self, partition: GridPartition):
        xyz = partition.points.xyz
        cid = partition.cell_id
        self.C = len(partition)
        z = xyz[:, 2]
        by_z = np.argsort(z, kind="quicksort")
        zs = z[by_z]
        if np.any(zs[1:] == zs[:-1]):
            by_z = np.argsort(z, kind="stable")
        self.perm = by_z[_stable_argsort_int(cid[by_z])]
        self.cols = tuple(xyz[:, i][self.perm] for i in range(3))
        self.z = self.cols[2]
        self.cid = cid[self.perm]
        self.starts = partition.starts[:-1]

    def sum(self, values) -> np.ndarray:
        return np.add.reduceat(values, self.starts, axis=0)

    def count(self, mask) -> np.ndarray:
        return self.sum(mask.astype(np.int64))


def _sym3_smallest(cov):
    """Eigenvalues (ascending) and the smallest-eigenvalue unit eigenvector of stacked symmetric 3x3 matrices.

    Closed form: trigonometric eigenvalues, eigenvector from the largest cross
    product of two rows of ``A - lambda_min I``.
    """
    a00, a11, a22 = cov[:, 0, 0], cov[:, 1, 1], cov[:, 2, 2]
    a01, a02, a12 = cov[:, 0, 1], cov[:, 0, 2], cov[:, 1, 2]
    q = (a00 + a11 + a22) / 3.0
    b00, b11, b22 = a00 - q, a11 - q, a22 - q
    p2 = (b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * (a01 * a01 + a02 * a02 + a12 * a12)) / 6.0
    p = np.sqrt(p2)
    det = b00 * (b11 * b22 - a12 * a12) - a01 * (a01 * b22 - a12 * a02) + a02 * (a01 * a12 - b11 * a02)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(p > 0.0, det / (2.0 * p * p2), 0.0)
    phi = np.arccos(np.clip(r, -1.0, 1.0)) / 3.0
    l3 = q + 2.0 * p * np.cos(phi)
    l1 = q + 2.0 * p * np.cos(phi + 2.0 * math.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    m00, m11, m22 = a00 - l1, a11 - l1, a22 - l1
    # cross products of row pairs of the symmetric A - l1 I, component-major
    cands = np.empty((3, 3, len(cov)))
    cands[0, 0] = a01 * a12 - a02 * m11
    cands[0, 1] = a02 * a01 - m00 * a12
    cands[0, 2] = m00 * m11 - a01 * a01
    cands[1, 0] = a01 * m22 - a02 * a12
    cands[1, 1] = a02 * a02 - m00 * m22
    cands[1, 2] = m00 * a12 - a01 * a02
    cands[2, 0] = m11 * m22 - a12 * a12
    cands[2, 1] = a12 * a02 - a01 * m22
    cands[2, 2] = a01 * a12 - m11 * a02
    norms = (cands * cands).sum(axis=1)
    best = np.argmax(norms, axis=0)
    rows = np.arange(len(cov))
    v = cands[best, :, rows]
    nv = np.sqrt(norms[best, rows])
    ok = nv > 0.0
    v = np.where(ok[:, None], v / np.where(ok, nv, 1.0)[:, None], np.array([0.0, 0.0, 1.0]))
    return np.stack([l1, l2, l3], axis=1), v


def _fit_planes(sp: _Sorted, mask, cells):
    """Batched PCA planes for ``cells`` from the points flagged in ``mask``."""
    C = sp.C
    sel = np.flatnonzero(mask & cells[sp.cid])
    c = sp.cid[sel]
    cnt = np.zeros(C)
    cen = np.zeros((C, 3))
    m = np.zeros((C, 6))
    if len(sel):
        # sel is cell-sorted: sum over the runs of each present cell
        first = np.flatnonzero(np.concatenate([[True], c[1:] != c[:-1]]))
        present = c[first]
        k = np.diff(np.append(first, len(sel))).astype(float)
        cnt[present] = k
        r = []
        for i, col in enumerate(sp.cols):
            v = col[sel]
            mu = np.add.reduceat(v, first) / k
            cen[present, i] = mu
            r.append(v - np.repeat(mu, k.astype(np.int64)))
        for j, (a, b) in enumerate(((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))):
            m[present, j] = np.add.reduceat(r[a] * r[b], first) / k
    cov = m[:, [0, 1, 2, 1, 3, 4, 2, 4, 5]].reshape(C, 3, 3)
    normal = np.zeros((C, 3))
    degenerate = cells & (cnt < 3)
    todo = np.flatnonzero(cells & ~degenerate)
    if len(todo):
        ev, n = _sym3_smallest(cov[todo])
        bad = ~(ev[:, 2] > 0.0) | (ev[:, 1] <= RANK_TOL * ev[:, 2])
        # sign convention n_z >= 0, ties toward +x then +y
        big = np.abs(n) > SIGN_TOL
        key = np.where(big[:, 2], n[:, 2], np.where(big[:, 0], n[:, 0], n[:, 1]))
        n = np.where((key < 0.0)[:, None], -n, n)
        normal[todo] = n
        degenerate[todo[bad]] = True
    d = -np.einsum("ij,ij->i", normal, cen)
    return normal, d, cen, degenerate


def _segment_core(sp: _Sorted, eligible, cells, zh_cell, params: SegParams):
    """Seeds, refinement and gate for ``cells`` using only ``eligible`` points (sorted order)."""
    C, cid, z = sp.C, sp.cid, sp.z
    cand = eligible & cells[cid]
    if params.use_prior_seeds:
        zh = zh_cell[cid]
        with np.errstate(invalid="ignore"):
            in_win = (z >= zh - params.delta_lower) & (z <= zh + params.delta_upper)
        cand &= np.isnan(zh) | in_win
    # 1-based rank among the cell's candidates, ascending height
    run = np.cumsum(cand)
    before = np.concatenate([[0], run])[sp.starts]
    rank = run - before[cid]
    seeds = cand & (rank <= params.k)
    n_seed = sp.count(seeds)
    z_init = sp.sum(np.where(seeds, z, 0.0)) / np.maximum(n_seed, 1)
    degenerate = cells & (n_seed == 0)
    active = cells & ~degenerate
    G = cand & (z <= z_init[cid] + params.delta_seed) & active[cid]

    normal = np.zeros((C, 3))
    d = np.zeros(C)
    centroid = np.zeros((C, 3))
    for _ in range(params.T):
        n_c, d_c, cen_c, bad = _fit_planes(sp, G, active)
        degenerate |= bad
        active &= ~bad
        idx = np.flatnonzero(active[cid] & eligible)
        ca = cid[idx]
        x, y, zz = (col[idx] for col in sp.cols)
        dist = np.abs(x * n_c[ca, 0] + y * n_c[ca, 1] + zz * n_c[ca, 2] + d_c[ca])
        G_new = np.zeros_like(G)
        G_new[idx] = dist < params.tau_d
        changed = sp.count((G_new != G) & active[cid]) > 0
        done = active & ~changed
        normal[done], d[done], centroid[done] = n_c[done], d_c[done], cen_c[done]
        active &= changed
        G = np.where(active[cid], G_new, G)
        if not active.any():
            break
    if active.any():
        n_c, d_c, cen_c, bad = _fit_planes(sp, G, active)
        degenerate |= bad
        fin = active & ~bad
        normal[fin], d[fin], centroid[fin] = n_c[fin], d_c[fin], cen_c[fin]

    G &= ~degenerate[cid] & cells[cid]
    n_g = sp.count(G).astype(float)
    safe = np.maximum(n_g, 1.0)
    zbar = sp.sum(np.where(G, z, 0.0)) / safe
    dz = np.where(G, z - zbar[cid], 0.0)
    sigma = np.sqrt(sp.sum(dz * dz) / safe)
    ok = cells & ~degenerate
    up = ok & (np.abs(normal[:, 2]) >= math.cos(params.theta_u))
    elev = ok & (np.isnan(zh_cell) | (np.abs(zbar - zh_cell) < params.tau_h))
    stab = ok & (sigma < params.tau_s)
    verdict = up & elev & stab
    zbar[~ok] = np.nan
    sigma[~ok] = np.nan
    return dict(
        G=G, normal=normal, d=d, centroid=centroid, zbar=zbar, sigma=sigma,
        up=up, elev=elev, stab=stab, degenerate=degenerate, verdict=verdict,
    )


def segment_frame(partition: GridPartition, prior: TerrainPrior, params: SegParams) -> SegmentationResult:
    n = len(partition.points)
    C = len(partition)
    if C == 0:
        return _empty_result(partition)
    sp = _Sorted(partition)
    cid = sp.cid
    zh_cell = prior.cell_heights(partition.keys, partition.s)
    valid = partition.counts >= params.N_min

    r = _segment_core(sp, np.ones(n, dtype=bool), valid, zh_cell, params)
    verdict = r["verdict"]
    initial = r["G"] & verdict[cid]
    reseg = np.zeros(n, dtype=bool)
    recall = np.zeros(n, dtype=bool)
    if params.use_refinement:
        z = sp.z
        resid = ~r["G"] & verdict[cid]
        n_res = sp.count(resid)
        zres = sp.sum(np.where(resid, z, 0.0)) / np.maximum(n_res, 1)
        trig = verdict & (n_res > params.N_re) & (np.abs(zres - r["zbar"]) < params.delta_z)
        if trig.any():
            r2 = _segment_core(sp, resid, trig, zh_cell, params)
            reseg = r2["G"] & r2["verdict"][cid]
        rej = ~verdict & ~np.isnan(zh_cell)
        zc = zh_cell[cid]
        with np.errstate(invalid="ignore"):
            recall = rej[cid] & (z <= zc + params.delta_h) & (z >= zc - params.delta_recall)

    def unsort(mask):
        out = np.empty(n, dtype=bool)
        out[sp.perm] = mask
        return out

    core = unsort(r["G"])
    initial, reseg, recall = unsort(initial), unsort(reseg), unsort(recall)
    return SegmentationResult(
        partition=partition,
        ground=initial | reseg | recall,
        z_hist=zh_cell,
        normal=r["normal"],
        d=r["d"],
        centroid=r["centroid"],
        mean_height=r["zbar"],
        dispersion=r["sigma"],
        uprightness=r["up"],
        elevation=r["elev"],
        stability=r["stab"],
        too_few=~valid,
        degenerate=r["degenerate"] & valid,
        verdict=verdict,
        core=core,
        initial=initial,
        resegmented=reseg,
        recalled=recall,
    )


def _empty_result(partition: GridPartition) -> SegmentationResult:
    n = len(partition.points)
    none = np.zeros(n, dtype=bool)
    z0, b0 = np.zeros(0), np.zeros(0, dtype=bool)
    return SegmentationResult(
        partition, none, z0, np.zeros((0, 3)), z0, np.zeros((0, 3)), z0, z0,
        b0, b0, b0, b0, b0, b0, none, none.copy(), none.copy(), none.copy(),
    )


def segment_frame_reference(partition: GridPartition, prior: TerrainPrior, params: SegParams):
    """Loop of :func:`segment_cell`; returns ``(ground mask, {cell: CellSegmentation})``."""
    xyz = partition.points.xyz
    ground = np.zeros(len(xyz), dtype=bool)
    zh_cell = prior.cell_heights(partition.keys, partition.s) if len(partition) else np.zeros(0)
    cells = {}
    for c, (u, v) in enumerate(partition.keys):
        idx = partition.cell_indices(c)
        seg = segment_cell(xyz[idx], zh_cell[c], params, (int(u), int(v)))
        ground[idx[seg.final_ground]] = True
        # re-express indices against the whole cloud
        seg.ground = idx[seg.ground]
        seg.resegmented = idx[seg.resegmented]
        seg.recalled = idx[seg.recalled]
        cells[(int(u), int(v))] = seg
    return ground, cells
