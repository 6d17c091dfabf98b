"""Rigid transforms, pose tracks and the radar -> motor -> body -> world chain.

World frame is right-handed and z-up. Rotations are 3x3 matrices at every
public boundary; pose tracks keep unit quaternions (x, y, z, w; Hamilton,
rotating body to world) internally so that the pose log round-trips exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import GapTooLarge, MalformedRecord, MissingFile, OutOfRange

TWO_PI = 2.0 * math.pi
DEFAULT_MAX_GAP = 0.1


def vec3(x, y, z) -> np.ndarray:
    return np.array([x, y, z], dtype=float)


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x' = rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -(Rt @ self.translation))

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or a batch (n, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def transform_point(t: RigidTransform, p) -> np.ndarray:
    return t.rotation @ np.asarray(p, dtype=float) + t.translation


def is_rotation(R: np.ndarray, atol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    return bool(
        np.allclose(R.T @ R, np.eye(3), rtol=0.0, atol=atol)
        and abs(np.linalg.det(R) - 1.0) <= atol
    )


# -- quaternions (x, y, z, w) -------------------------------------------------


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices for unit quaternions; accepts (4,) or (n, 4)."""
    q = np.asarray(q, dtype=float)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    R[..., 0, 1] = 2.0 * (xy - wz)
    R[..., 0, 2] = 2.0 * (xz + wy)
    R[..., 1, 0] = 2.0 * (xy + wz)
    R[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    R[..., 1, 2] = 2.0 * (yz - wx)
    R[..., 2, 0] = 2.0 * (xz - wy)
    R[..., 2, 1] = 2.0 * (yz + wx)
    R[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return R


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion (w >= 0) for a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    if q[3] < 0.0:
        q = -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ax, ay, az, aw = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bx, by, bz, bw = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_slerp(q0, q1, alpha) -> np.ndarray:
    """Geodesic (constant angular rate) interpolation, vectorised over rows."""
    q0 = np.atleast_2d(np.asarray(q0, dtype=float))
    q1 = np.atleast_2d(np.asarray(q1, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))[:, None]
    dot = np.sum(q0 * q1, axis=1, keepdims=True)
    q1 = np.where(dot < 0.0, -q1, q1)
    dot = np.abs(dot)
    omega = np.arccos(np.clip(dot, -1.0, 1.0))
    so = np.sin(omega)
    small = so < 1e-12
    safe = np.where(small, 1.0, so)
    w0 = np.where(small, 1.0 - alpha, np.sin((1.0 - alpha) * omega) / safe)
    w1 = np.where(small, alpha, np.sin(alpha * omega) / safe)
    q = w0 * q0 + w1 * q1
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def quat_from_euler(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """ZYX (yaw, pitch, roll) Euler angles to a unit quaternion."""
    cr, sr = math.cos(roll / 2), math.sin(roll / 2)
    cp, sp = math.cos(pitch / 2), math.sin(pitch / 2)
    cy, sy = math.cos(yaw / 2), math.sin(yaw / 2)
    return np.array(
        [
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
            cr * cp * cy + sr * sp * sy,
        ]
    )


# -- encoder angles and the sensing chain ------------------------------------


def quantize_angle(theta: float, step: float) -> float:
    """Snap an encoder reading to the nearest multiple of ``step`` in [0, 2pi)."""
    steps_per_rev = int(round(TWO_PI / step))
    i = int(round(theta / step)) % steps_per_rev
    return i * step


def spin(theta) -> np.ndarray:
    """Radar-to-motor rotation(s) about the motor +z axis."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    R = np.zeros(theta.shape + (3, 3))
    R[..., 0, 0] = c
    R[..., 0, 1] = -s
    R[..., 1, 0] = s
    R[..., 1, 1] = c
    R[..., 2, 2] = 1.0
    return R


def radar_to_world(p_radar, theta: float, mount: RigidTransform, body_pose: RigidTransform) -> np.ndarray:
    """Map one radar-frame point through spin(theta), the mount and the body pose."""
    chain = compose(body_pose, compose(mount, RigidTransform(spin(theta))))
    return transform_point(chain, p_radar)


def radar_to_world_batch(points, thetas, mount: RigidTransform, R_body, t_body) -> np.ndarray:
    """Vectorised :func:`radar_to_world` with one body pose per point."""
    p_motor = np.einsum("nij,nj->ni", spin(thetas), np.asarray(points, dtype=float))
    p_body = p_motor @ mount.rotation.T + mount.translation
    return np.einsum("nij,nj->ni", R_body, p_body) + t_body


# -- pose tracks --------------------------------------------------------------


@dataclass(frozen=True)
class PoseSample:
    timestamp: float
    body_to_world: RigidTransform


class PoseTrack:
    """Time-ordered body-to-world poses with geodesic interpolation.

    Lookups inside the span succeed whenever the bracketing samples are at
    most ``max_gap`` seconds apart; at a sample timestamp the stored pose is
    returned unchanged.
    """

    def __init__(self, timestamps, quaternions, positions, max_gap: float = DEFAULT_MAX_GAP):
        t = np.array(timestamps, dtype=float).reshape(-1)
        q = np.array(quaternions, dtype=float).reshape(-1, 4)
        p = np.array(positions, dtype=float).reshape(-1, 3)
        if not (len(t) == len(q) == len(p)):
            raise ValueError("timestamps, quaternions and positions differ in length")
        if len(t) == 0:
            raise ValueError("a pose track needs at least one sample")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("pose timestamps must be strictly increasing")
        if max_gap <= 0.0:
            raise ValueError("max_gap must be positive")
        for arr in (t, q, p):
            arr.setflags(write=False)
        self.timestamps = t
        self.quaternions = q
        self.positions = p
        self.max_gap = float(max_gap)
        self._R = quat_to_matrix(q)
        self._R.setflags(write=False)

    @classmethod
    def from_samples(cls, samples: Sequence[PoseSample], max_gap: float = DEFAULT_MAX_GAP) -> "PoseTrack":
        return cls(
            [s.timestamp for s in samples],
            [matrix_to_quat(s.body_to_world.rotation) for s in samples],
            [s.body_to_world.translation for s in samples],
            max_gap,
        )

    def __len__(self):
        return len(self.timestamps)

    def __eq__(self, other):
        if not isinstance(other, PoseTrack):
            return NotImplemented
        return (
            self.max_gap == other.max_gap
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.quaternions, other.quaternions)
            and np.array_equal(self.positions, other.positions)
        )

    @property
    def span(self) -> tuple[float, float]:
        return float(self.timestamps[0]), float(self.timestamps[-1])

    @property
    def samples(self) -> list[PoseSample]:
        return [self.sample(i) for i in range(len(self))]

    def sample(self, i: int) -> PoseSample:
        return PoseSample(float(self.timestamps[i]), RigidTransform(self._R[i], self.positions[i]))

    def pose_at(self, t: float) -> RigidTransform:
        R, p = self.poses_at(np.array([t], dtype=float))
        return RigidTransform(R[0], p[0])

    def poses_at(self, ts, strict: bool = True):
        """Rotations (n, 3, 3) and translations (n, 3) at times ``ts``.

        With ``strict=False`` failing lookups are reported through a boolean
        ``ok`` mask (third return value) instead of raising.
        """
        ts = np.asarray(ts, dtype=float).reshape(-1)
        times = self.timestamps
        n = len(times)
        hi = np.searchsorted(times, ts, side="left")
        exact = (hi < n) & (times[np.minimum(hi, n - 1)] == ts)
        outside = (ts < times[0]) | (ts > times[-1]) | ~np.isfinite(ts)
        hi_c = np.clip(hi, 1, max(n - 1, 1))
        lo_c = hi_c - 1
        if n > 1:
            gap = times[hi_c] - times[lo_c]
        else:
            gap = np.zeros_like(ts)
        too_wide = ~exact & ~outside & (gap > self.max_gap)
        ok = ~outside & ~too_wide
        if strict:
            if np.any(outside):
                bad = ts[outside][0]
                raise OutOfRange(f"t={bad!r} outside pose track span [{times[0]!r}, {times[-1]!r}]")
            if np.any(too_wide):
                bad = ts[too_wide][0]
                raise GapTooLarge(f"pose gap around t={bad!r} exceeds max_gap={self.max_gap}")

        R = np.empty((len(ts), 3, 3))
        P = np.empty((len(ts), 3))
        R[:] = np.nan
        P[:] = np.nan
        idx_exact = np.flatnonzero(exact)
        R[idx_exact] = self._R[hi[idx_exact]]
        P[idx_exact] = self.positions[hi[idx_exact]]
        interp = np.flatnonzero(ok & ~exact)
        if len(interp) and n > 1:
            lo_i, hi_i = lo_c[interp], hi_c[interp]
            a = (ts[interp] - times[lo_i]) / (times[hi_i] - times[lo_i])
            P[interp] = self.positions[lo_i] + a[:, None] * (self.positions[hi_i] - self.positions[lo_i])
            R[interp] = quat_to_matrix(quat_slerp(self.quaternions[lo_i], self.quaternions[hi_i], a))
        if strict:
            return R, P
        return R, P, ok


def pose_at(track: PoseTrack, t: float) -> RigidTransform:
    return track.pose_at(t)


# -- pose log file ------------------------------------------------------------


def write_pose_log(path, track: PoseTrack) -> None:
    lines = [
        "# t qx qy qz qw px py pz",
        f"# max_gap = {track.max_gap!r}",
    ]
    for t, q, p in zip(track.timestamps.tolist(), track.quaternions.tolist(), track.positions.tolist()):
        lines.append(" ".join(repr(v) for v in (t, *q, *p)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose_log(path, max_gap: float | None = None) -> PoseTrack:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"pose log not found: {path}")
    ts, qs, ps = [], [], []
    gap = DEFAULT_MAX_GAP
    for line_no, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("max_gap"):
                try:
                    gap = float(body.split("=", 1)[1])
                except (IndexError, ValueError):
                    raise MalformedRecord(path, line_no, "bad max_gap comment") from None
            continue
        fields = line.split(" ")
        if len(fields) != 8:
            raise MalformedRecord(path, line_no, f"expected 8 fields, got {len(fields)}")
        try:
            vals = [float(f) for f in fields]
        except ValueError:
            raise MalformedRecord(path, line_no, "non-numeric field") from None
        q = np.array(vals[1:5])
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise MalformedRecord(path, line_no, "quaternion is not unit length")
        ts.append(vals[0])
        qs.append(vals[1:5])
        ps.append(vals[5:8])
    if not ts:
        raise MalformedRecord(path, 0, "no pose samples")
    if np.any(np.diff(ts) <= 0.0):
        raise MalformedRecord(path, 0, "timestamps are not strictly increasing")
    return PoseTrack(ts, qs, ps, gap if max_gap is None else max_gap)


def concat_points(chunks: Iterable[np.ndarray]) -> np.ndarray:
    chunks = [np.asarray(c, dtype=float).reshape(-1, 3) for c in chunks]
    if not chunks:
        return np.zeros((0, 3))
    return np.concatenate(chunks, axis=0)
