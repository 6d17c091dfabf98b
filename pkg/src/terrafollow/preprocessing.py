"""Registration, downward-cone FoV filter, temporal accumulation, XY grid."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import FrameRegistrationError
from .geometry import PoseTrack, RigidTransform, radar_to_world_batch
from .sim import RadarScanFrame

UNLABELED = -1
# point ids pack (frame, return index); frames hold far fewer returns
ID_STRIDE = 1 << 32


@dataclass(eq=False)
class PointCloud:
    """World points with optional labels (-1 = unknown) and their source frame ids."""

    xyz: np.ndarray
    labels: np.ndarray
    source_frame: np.ndarray
    point_id: np.ndarray

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        n = len(self.xyz)
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(n)
        self.source_frame = np.asarray(self.source_frame, dtype=np.int64).reshape(n)
        self.point_id = np.asarray(self.point_id, dtype=np.int64).reshape(n)

    def __len__(self):
        return len(self.xyz)

    @classmethod
    def from_xyz(cls, xyz, labels=None, source_frame: int = 0) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        n = len(xyz)
        lab = np.full(n, UNLABELED) if labels is None else labels
        return cls(xyz, lab, np.full(n, source_frame), source_frame * ID_STRIDE + np.arange(n))

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0))

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.xyz[index], self.labels[index], self.source_frame[index], self.point_id[index])

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud.empty()
        return PointCloud(
            np.concatenate([c.xyz for c in clouds]),
            np.concatenate([c.labels for c in clouds]),
            np.concatenate([c.source_frame for c in clouds]),
            np.concatenate([c.point_id for c in clouds]),
        )


@dataclass(eq=False)
class RegisteredFrame:
    frame_index: int
    points: PointCloud
    uav_position: np.ndarray

    def __len__(self):
        return len(self.points)


def reference_time(frame: RadarScanFrame) -> float:
    return 0.5 * (frame.t_start + frame.t_end)


def register_frame(
    frame: RadarScanFrame,
    track: PoseTrack,
    mount: RigidTransform,
    max_failure_fraction: float = 0.1,
) -> RegisteredFrame:
    """Map every return to the world frame with the pose at its own timestamp.

    Returns whose pose lookup fails are dropped; more than
    ``max_failure_fraction`` failures fail the whole frame.
    """
    n = len(frame)
    R, t, ok = track.poses_at(frame.timestamps, strict=False)
    n_bad = int(n - ok.sum())
    if n and n_bad / n > max_failure_fraction:
        raise FrameRegistrationError(
            f"frame {frame.frame_index}: {n_bad}/{n} returns outside the pose track or across a pose gap"
        )
    idx = np.flatnonzero(ok)
    world = radar_to_world_batch(frame.points[idx], frame.thetas[idx], mount, R[idx], t[idx])
    cloud = PointCloud(
        world,
        frame.labels[idx],
        np.full(len(idx), frame.frame_index),
        frame.frame_index * ID_STRIDE + idx,
    )
    uav = track.pose_at(reference_time(frame)).translation.copy()
    return RegisteredFrame(frame.frame_index, cloud, uav)


def fov_mask(xyz: np.ndarray, uav_position, phi: float) -> np.ndarray:
    """Points inside the +-phi cone around straight down from the UAV."""
    r = np.asarray(xyz, dtype=float) - np.asarray(uav_position, dtype=float)
    norm = np.linalg.norm(r, axis=1)
    keep = norm > 0.0
    ratio = np.zeros(len(r))
    ratio[keep] = -r[keep, 2] / norm[keep]
    return keep & (ratio >= math.cos(phi))


def fov_filter(frame: RegisteredFrame, phi: float) -> RegisteredFrame:
    if not 0.0 < phi <= math.pi / 2:
        raise ValueError("phi must lie in (0, pi/2]")
    mask = fov_mask(frame.points.xyz, frame.uav_position, phi)
    return RegisteredFrame(frame.frame_index, frame.points.subset(mask), frame.uav_position)


class AccumulationWindow:
    """Ring of the last ``K`` filtered frames."""

    def __init__(self, K: int):
        if K < 1:
            raise ValueError("K must be >= 1")
        self.K = int(K)
        self._frames: deque[RegisteredFrame] = deque(maxlen=self.K)

    def __len__(self):
        return len(self._frames)

    def push(self, frame: RegisteredFrame) -> PointCloud:
        if self._frames and frame.frame_index <= self._frames[-1].frame_index:
            raise ValueError("frames must be pushed in increasing index order")
        self._frames.append(frame)
        return self.snapshot()

    def snapshot(self) -> PointCloud:
        return PointCloud.concat(f.points for f in self._frames)

    def clear(self):
        self._frames.clear()


def accumulate(window: AccumulationWindow, frame: RegisteredFrame) -> PointCloud:
    return window.push(frame)


def grid_index(xy, s: float) -> np.ndarray:
    """Integer (u, v) = floor(xy / s); works for negative coordinates."""
    return np.floor(np.asarray(xy, dtype=float) / s).astype(np.int64)


class GridPartition:
    """Points bucketed into s x s cells on the world XY plane.

    Cells are numbered 0..C-1 in lexicographic (u, v) order. ``order`` lists
    point indices grouped by cell (input order preserved inside a cell) and
    ``starts[c]:starts[c + 1]`` delimits cell ``c`` within it.
    """

    def __init__(self, points: PointCloud, s: float):
        if not s > 0.0:
            raise ValueError("grid resolution must be positive")
        self.points = points
        self.s = float(s)
        n = len(points)
        if n == 0:
            self.order = np.zeros(0, dtype=np.int64)
            self.starts = np.zeros(1, dtype=np.int64)
            self.keys = np.zeros((0, 2), dtype=np.int64)
            self.cell_id = np.zeros(0, dtype=np.int64)
            return
        u = np.floor(points.xyz[:, 0] / s).astype(np.int64)
        v = np.floor(points.xyz[:, 1] / s).astype(np.int64)
        u0, v0 = u.min(), v.min()
        span = int(v.max() - v0) + 1
        flat = (u - u0) * span + (v - v0)
        # unique keys: quicksort reproduces the stable order
        order = np.argsort(flat * n + np.arange(n), kind="quicksort")
        fs = flat[order]
        new = np.empty(n, dtype=bool)
        new[0] = True
        np.not_equal(fs[1:], fs[:-1], out=new[1:])
        first = np.flatnonzero(new)
        self.order = order
        self.starts = np.append(first, n)
        self.keys = np.column_stack([fs[first] // span + u0, fs[first] % span + v0])
        self.cell_id = np.empty(n, dtype=np.int64)
        self.cell_id[order] = np.cumsum(new) - 1

    def __len__(self):
        return len(self.keys)

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.starts)

    def cell_indices(self, c: int) -> np.ndarray:
        return self.order[self.starts[c] : self.starts[c + 1]]

    @property
    def cells(self) -> dict[tuple[int, int], np.ndarray]:
        return {(int(u), int(v)): self.cell_indices(c) for c, (u, v) in enumerate(self.keys)}

    def cell_centers(self) -> np.ndarray:
        return (self.keys + 0.5) * self.s


def partition(points: PointCloud, s: float) -> GridPartition:
    return GridPartition(points, s)
