"""Frame-by-frame composition: registration, segmentation, terrain update, altitude command."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import PipelineConfig
from .geometry import PoseTrack, RigidTransform
from .preprocessing import (
    AccumulationWindow,
    PointCloud,
    RegisteredFrame,
    fov_mask,
    partition,
    reference_time,
    register_frame,
)
from .segmentation import SegmentationResult, TerrainPrior, segment_frame
from .sim import RadarScanFrame
from .surface import (
    ControlLattice,
    TerrainSurface,
    altitude_command,
    fit_surface,
    incremental_update,
    make_control_points,
)


@dataclass(eq=False)
class FrameOutput:
    frame_index: int
    t: float
    uav_position: np.ndarray
    cloud: PointCloud  # accumulated window the segmentation ran on
    segmentation: SegmentationResult
    latency_s: float
    # every registered return of this frame, FoV-removed ones included
    frame_points: PointCloud
    frame_pred: np.ndarray  # bool: predicted ground, as labelled by this frame's window
    kept: np.ndarray  # indices of frame_points that passed the FoV filter
    z_terr: float
    z_cmd: float
    extrapolated: bool
    changed: set = field(default_factory=set)

    def log_line(self) -> str:
        x, y = float(self.uav_position[0]), float(self.uav_position[1])
        return f"{float(self.t)!r} {x!r} {y!r} {float(self.z_terr)!r} {float(self.z_cmd)!r} {int(self.extrapolated)}"


def surface_prior(surface: Optional[TerrainSurface], reach: float) -> TerrainPrior:
    """Prior backed by ``surface``.

    Outside the domain the surface is continued linearly from the nearest
    boundary point for up to ``reach`` metres, then held constant.
    """
    if surface is None:
        return TerrainPrior.absent()

    def query(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z, extrap = surface.query_batch(x, y)
        xmin, xmax, ymin, ymax = surface.domain
        bx = np.clip(x, xmin, xmax)
        by = np.clip(y, ymin, ymax)
        out = np.asarray(z, dtype=float).copy()
        if np.any(extrap):
            dx, dy = x[extrap] - bx[extrap], y[extrap] - by[extrap]
            dist = np.hypot(dx, dy)
            scale = np.minimum(1.0, reach / np.maximum(dist, 1e-300))
            g = surface.gradient_batch(x[extrap], y[extrap])
            out[extrap] += scale * (g[:, 0] * dx + g[:, 1] * dy)
        return out

    return TerrainPrior(query)


def cell_gradients(seg: SegmentationResult, surface: Optional[TerrainSurface]) -> dict:
    """Local dz/dx, dz/dy per cell.

    Accepted cells use their plane; other cells use the prior surface where it
    rests on observed control points only. Cells with neither are absent.
    """
    keys = seg.partition.keys
    grad = np.full((len(keys), 2), np.nan)
    acc = seg.verdict
    n = seg.normal[acc]
    grad[acc, 0] = -n[:, 0] / n[:, 2]
    grad[acc, 1] = -n[:, 1] / n[:, 2]
    rest = np.flatnonzero(~acc)
    if surface is not None and len(rest):
        centers = (keys[rest] + 0.5) * seg.partition.s
        near = surface.supported_mask(centers[:, 0], centers[:, 1])
        grad[rest[near]] = surface.gradient_batch(centers[near, 0], centers[near, 1])
    ok = ~np.isnan(grad[:, 0])
    return {(int(u), int(v)): (float(gx), float(gy)) for (u, v), (gx, gy) in zip(keys[ok], grad[ok])}


@dataclass(eq=False)
class ScoredFrame:
    """Final predictions for one frame's registered returns."""

    frame_index: int
    labels: np.ndarray
    pred: np.ndarray


class WindowScorer:
    """Tracks predictions for the returns of every frame still in the window.

    Each segmentation relabels all frames it covers; a frame's predictions
    become final when it leaves the window. FoV-removed returns stay
    non-ground.
    """

    def __init__(self):
        self._open: list = []
        self.scored: list[ScoredFrame] = []

    def update(self, frame_index: int, labels, kept, ground, source_frame) -> np.ndarray:
        self._open.append((frame_index, labels, kept, np.zeros(len(labels), dtype=bool)))
        live = set(np.unique(source_frame).tolist()) | {frame_index}
        still = []
        for entry in self._open:
            index, lab, kept_i, pred = entry
            if index not in live:
                self.scored.append(ScoredFrame(index, lab, pred))
                continue
            pred[:] = False
            pred[kept_i] = ground[source_frame == index]
            still.append(entry)
        self._open = still
        return self._open[-1][3].copy()

    def flush(self) -> list[ScoredFrame]:
        self.scored.extend(ScoredFrame(i, lab, pred) for i, lab, _, pred in self._open)
        self._open = []
        return self.scored


class TerrainPipeline:
    """Stateful online pipeline; feed frames in increasing index order."""

    def __init__(self, config: PipelineConfig, mount: RigidTransform):
        self.config = config
        self.mount = mount
        self.params = config.seg_params()
        self.window = AccumulationWindow(config.K)
        self.lattice = ControlLattice(config.s, {})
        self.surface: Optional[TerrainSurface] = None
        self.scorer = WindowScorer()

    @property
    def scored(self) -> list[ScoredFrame]:
        return self.scorer.scored

    def prior(self) -> TerrainPrior:
        return surface_prior(self.surface, self.config.prior_reach)

    def process(self, frame: RadarScanFrame, track: PoseTrack) -> FrameOutput:
        cfg = self.config
        reg = register_frame(frame, track, self.mount, cfg.max_failure_fraction)
        kept = np.flatnonzero(fov_mask(reg.points.xyz, reg.uav_position, cfg.phi))
        cloud = self.window.push(RegisteredFrame(reg.frame_index, reg.points.subset(kept), reg.uav_position))
        # snapshot of the previous frame's surface
        prior = self.prior()

        t0 = time.perf_counter()
        part = partition(cloud, cfg.s)
        seg = segment_frame(part, prior, self.params)
        latency = time.perf_counter() - t0

        frame_pred = self.scorer.update(frame.frame_index, reg.points.labels, kept, seg.ground, cloud.source_frame)

        changed = self.update_surface(seg, frame.frame_index)
        x, y = float(reg.uav_position[0]), float(reg.uav_position[1])
        if self.surface is None:
            z_terr, z_cmd, extrap = float("nan"), float("nan"), True
        else:
            z_cmd, extrap = altitude_command(self.surface, x, y, cfg.h_ref)
            z_terr = z_cmd - cfg.h_ref
        return FrameOutput(
            frame.frame_index,
            reference_time(frame),
            reg.uav_position,
            cloud,
            seg,
            latency,
            reg.points,
            frame_pred,
            kept,
            z_terr,
            z_cmd,
            extrap,
            changed,
        )

    def flush(self) -> list[ScoredFrame]:
        """Finalize the frames still in the window (end of stream)."""
        return self.scorer.flush()

    def update_surface(self, seg: SegmentationResult, frame_index: int) -> set:
        cfg = self.config
        xyz = seg.partition.points.xyz
        cells = {key: xyz[idx] for key, idx in seg.ground_by_cell().items()}
        grads = None
        if cfg.slope_compensation:
            grads = cell_gradients(seg, self.surface)
            cells = {key: pts for key, pts in cells.items() if key in grads}
        new = make_control_points(cells, cfg.s, cfg.rho, frame_index, grads)
        self.lattice, changed = incremental_update(self.lattice, new, cfg.tau_c)
        if changed:
            self.surface = fit_surface(self.lattice, cfg.k_x, cfg.k_y)
        return changed


def run_pipeline(frames, track: PoseTrack, config: PipelineConfig, mount: RigidTransform) -> tuple[TerrainPipeline, list[FrameOutput]]:
    pipe = TerrainPipeline(config, mount)
    outs = [pipe.process(f, track) for f in frames]
    pipe.flush()
    return pipe, outs
