"""Deterministic synthetic rotating-radar scenarios.

A scenario is a parametric heightfield, a straight flight line, a clutter
model and a radar description. ``generate_scenario`` samples a 400 Hz pose
track, then one 10 Hz frame per full radar revolution: at every encoder step
a handful of beams are cast inside a cone around the tilted boresight and
intersected with the terrain. Vegetation returns sit on a beam at a random
height above the surface, multipath returns continue below it. Every return
carries its construction-time ground label.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .geometry import (
    TWO_PI,
    PoseTrack,
    RigidTransform,
    quat_from_euler,
    spin,
)
from .kvfile import format_value, parse_float, parse_floats, read_kv
from .rng import Stream

# substream ids for Stream(seed, stream, frame)
_S_BEAMS, _S_NOISE, _S_VEG, _S_MULTIPATH = 1, 2, 3, 4

GROUND, CLUTTER = 1, 0


# -- terrain ------------------------------------------------------------------


class TerrainField:
    kind = "abstract"

    def height(self, x, y):
        raise NotImplementedError

    def slope_bound(self) -> float:
        """Upper bound on |dh/dx| and |dh/dy|."""
        raise NotImplementedError

    def to_text(self) -> str:
        raise NotImplementedError

    def __eq__(self, other):
        return type(self) is type(other) and self.to_text() == other.to_text()

    def __hash__(self):
        return hash(self.to_text())

    def __repr__(self):
        return self.to_text()


def _args(*vals) -> str:
    return ", ".join(repr(float(v)) for v in vals)


class Flat(TerrainField):
    kind = "flat"

    def __init__(self, c: float = 0.0):
        self.c = float(c)

    def height(self, x, y):
        return np.zeros_like(np.asarray(x, dtype=float)) + self.c

    def slope_bound(self):
        return 0.0

    def to_text(self):
        return f"flat({_args(self.c)})"


class Slope(TerrainField):
    """h = a*x + b*y + c."""

    kind = "slope"

    def __init__(self, a: float, b: float = 0.0, c: float = 0.0):
        self.a, self.b, self.c = float(a), float(b), float(c)

    def height(self, x, y):
        return self.a * np.asarray(x, dtype=float) + self.b * np.asarray(y, dtype=float) + self.c

    def slope_bound(self):
        return max(abs(self.a), abs(self.b))

    def to_text(self):
        return f"slope({_args(self.a, self.b, self.c)})"


class Hill(TerrainField):
    """h = A sin(2 pi x / L) sin(2 pi y / L) + c."""

    kind = "hill"

    def __init__(self, amplitude: float, wavelength: float, c: float = 0.0):
        if wavelength <= 0.0:
            raise ValueError("hill wavelength must be positive")
        self.amplitude, self.wavelength, self.c = float(amplitude), float(wavelength), float(c)

    def height(self, x, y):
        k = TWO_PI / self.wavelength
        return self.amplitude * np.sin(k * np.asarray(x, dtype=float)) * np.sin(k * np.asarray(y, dtype=float)) + self.c

    def slope_bound(self):
        return abs(self.amplitude) * TWO_PI / self.wavelength

    def to_text(self):
        return f"hill({_args(self.amplitude, self.wavelength, self.c)})"


class Ramp(TerrainField):
    """Smooth step along x: 0 before ``x0``, ``-drop`` after ``x0 + width``.

    Uses the cubic smoothstep, so the surface stays C1 and the steepest
    gradient is ``1.5 * drop / width``.
    """

    kind = "ramp"

    def __init__(self, x0: float, width: float, drop: float):
        if width <= 0.0:
            raise ValueError("ramp width must be positive")
        self.x0, self.width, self.drop = float(x0), float(width), float(drop)

    def height(self, x, y):
        u = np.clip((np.asarray(x, dtype=float) - self.x0) / self.width, 0.0, 1.0)
        return -self.drop * u * u * (3.0 - 2.0 * u) + 0.0 * np.asarray(y, dtype=float)

    def slope_bound(self):
        return 1.5 * abs(self.drop) / self.width

    def to_text(self):
        return f"ramp({_args(self.x0, self.width, self.drop)})"


class Composite(TerrainField):
    """Sum of primitive fields."""

    kind = "composite"

    def __init__(self, terms: Sequence[TerrainField]):
        if not terms:
            raise ValueError("composite terrain needs at least one term")
        flat_terms = []
        for t in terms:
            flat_terms.extend(t.terms if isinstance(t, Composite) else [t])
        self.terms = tuple(flat_terms)

    def height(self, x, y):
        h = self.terms[0].height(x, y)
        for t in self.terms[1:]:
            h = h + t.height(x, y)
        return h

    def slope_bound(self):
        return sum(t.slope_bound() for t in self.terms)

    def to_text(self):
        return " + ".join(t.to_text() for t in self.terms)


_PRIMITIVES = {"flat": (Flat, 1), "slope": (Slope, 3), "hill": (Hill, 3), "ramp": (Ramp, 3)}
_TERM = re.compile(r"\s*(\w+)\s*\(([^()]*)\)\s*")


def parse_terrain(text: str) -> TerrainField:
    terms = []
    pos = 0
    while True:
        m = _TERM.match(text, pos)
        if not m:
            raise ValueError(f"cannot parse terrain term at {text[pos:]!r}")
        name, args = m.group(1), m.group(2)
        if name not in _PRIMITIVES:
            raise ValueError(f"unknown terrain kind {name!r}; expected one of {sorted(_PRIMITIVES)}")
        cls, n = _PRIMITIVES[name]
        vals = [parse_float(a) for a in args.split(",")] if args.strip() else []
        if len(vals) != n:
            raise ValueError(f"{name} takes {n} arguments, got {len(vals)}")
        terms.append(cls(*vals))
        pos = m.end()
        if pos == len(text):
            break
        if text[pos] != "+":
            raise ValueError(f"expected '+' between terrain terms at {text[pos:]!r}")
        pos += 1
    return terms[0] if len(terms) == 1 else Composite(terms)


def terrain_height(field: TerrainField, x, y):
    """Analytic terrain height; scalar in, float out."""
    h = field.height(x, y)
    return float(h) if np.ndim(h) == 0 else h


# -- scenario description -----------------------------------------------------


@dataclass(frozen=True)
class ClutterModel:
    vegetation_rate: float = 0.0
    vegetation_height_range: tuple[float, float] = (0.3, 1.2)
    multipath_rate: float = 0.0
    multipath_depth_range: tuple[float, float] = (0.6, 3.0)
    range_noise_sigma: float = 0.0
    # multipath only where x >= multipath_x_min (the water body)
    multipath_x_min: float = -math.inf


@dataclass(frozen=True)
class RadarConfig:
    angular_step: float = math.radians(5.0)
    beams_per_step: int = 8
    beam_cone_half_angle: float = math.radians(15.0)
    boresight_tilt: float = math.radians(20.0)
    max_range: float = 60.0
    frame_rate: float = 10.0
    pose_rate: float = 400.0
    mount_translation: tuple[float, float, float] = (0.0, 0.0, -0.15)

    @property
    def steps_per_rev(self) -> int:
        return int(round(TWO_PI / self.angular_step))

    @property
    def mount(self) -> RigidTransform:
        return RigidTransform(np.eye(3), self.mount_translation)


@dataclass(frozen=True)
class Trajectory:
    start: tuple[float, float, float] = (0.0, 0.0, 10.0)
    end: tuple[float, float, float] = (40.0, 0.0, 10.0)
    speed: float = 5.0
    altitude_mode: str = "constant-agl"  # or "constant-z"
    agl: float = 5.0
    attitude_wobble: float = math.radians(2.0)


@dataclass(frozen=True)
class ScenarioSpec:
    terrain: TerrainField = field(default_factory=Flat)
    clutter: ClutterModel = field(default_factory=ClutterModel)
    trajectory: Trajectory = field(default_factory=Trajectory)
    radar: RadarConfig = field(default_factory=RadarConfig)
    seed: int = 0
    name: str = "scenario"

    def validate(self) -> None:
        tr, rd, cl = self.trajectory, self.radar, self.clutter
        if tr.speed <= 0.0:
            raise ValueError("speed must be positive")
        if tr.altitude_mode not in ("constant-z", "constant-agl"):
            raise ValueError(f"altitude_mode must be constant-z or constant-agl, not {tr.altitude_mode!r}")
        if tr.altitude_mode == "constant-agl" and tr.agl <= 0.0:
            raise ValueError("agl must be positive")
        if np.allclose(tr.start[:2], tr.end[:2]):
            raise ValueError("trajectory start and end coincide horizontally")
        n = TWO_PI / rd.angular_step
        if rd.angular_step <= 0.0 or abs(n - round(n)) > 1e-9:
            raise ValueError("angular_step must divide 2*pi")
        if rd.beams_per_step < 1:
            raise ValueError("beams_per_step must be >= 1")
        if not 0.0 <= rd.beam_cone_half_angle < math.pi / 2:
            raise ValueError("beam_cone_half_angle must lie in [0, pi/2)")
        if rd.boresight_tilt + rd.beam_cone_half_angle >= math.pi / 2:
            raise ValueError("beams must point below the horizon")
        if rd.max_range <= 0.0 or rd.frame_rate <= 0.0 or rd.pose_rate <= 0.0:
            raise ValueError("max_range, frame_rate and pose_rate must be positive")
        for name in ("vegetation_rate", "multipath_rate", "range_noise_sigma"):
            if getattr(cl, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("vegetation_height_range", "multipath_depth_range"):
            lo, hi = getattr(cl, name)
            if not 0.0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi")
        if self.terrain.slope_bound() > 2.0:
            raise ValueError("terrain slope exceeds 2")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


# -- frames -------------------------------------------------------------------


@dataclass(frozen=True)
class RadarReturn:
    timestamp: float
    theta: float
    point_radar: np.ndarray
    is_ground: bool


@dataclass(eq=False)
class RadarScanFrame:
    """One revolution of returns, stored column-wise."""

    frame_index: int
    t_start: float
    t_end: float
    timestamps: np.ndarray
    thetas: np.ndarray
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.thetas = np.asarray(self.thetas, dtype=float).reshape(-1)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        n = len(self.timestamps)
        if not (len(self.thetas) == len(self.points) == len(self.labels) == n):
            raise ValueError("frame columns differ in length")

    def __len__(self):
        return len(self.timestamps)

    def __eq__(self, other):
        if not isinstance(other, RadarScanFrame):
            return NotImplemented
        return (
            self.frame_index == other.frame_index
            and self.t_start == other.t_start
            and self.t_end == other.t_end
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.thetas, other.thetas)
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def returns(self) -> list[RadarReturn]:
        return [
            RadarReturn(float(t), float(th), p.copy(), bool(lab))
            for t, th, p, lab in zip(self.timestamps, self.thetas, self.points, self.labels)
        ]

    @classmethod
    def empty(cls, frame_index: int, t_start: float, t_end: float) -> "RadarScanFrame":
        return cls(frame_index, t_start, t_end, np.zeros(0), np.zeros(0), np.zeros((0, 3)), np.zeros(0))


# -- generation ---------------------------------------------------------------


def _boresight_basis(tilt: float) -> np.ndarray:
    """Columns: local x, local y, boresight, all in the radar frame."""
    c, s = math.cos(tilt), math.sin(tilt)
    return np.array([[c, 0.0, s], [0.0, -1.0, 0.0], [s, 0.0, -c]])


def _cone_directions(stream: Stream, n: int, half_angle: float, tilt: float) -> np.ndarray:
    """Unit vectors uniform on the spherical cap around the boresight."""
    cos_a = 1.0 - stream.uniform(n) * (1.0 - math.cos(half_angle))
    phi = TWO_PI * stream.uniform(n)
    sin_a = np.sqrt(np.maximum(0.0, 1.0 - cos_a * cos_a))
    local = np.stack([sin_a * np.cos(phi), sin_a * np.sin(phi), cos_a], axis=1)
    return local @ _boresight_basis(tilt).T


def intersect_rays(terrain: TerrainField, origins, dirs, max_range: float, offset=0.0, step: float = 0.25):
    """First range s in (0, max_range] where z(o + s d) - h(x, y) == offset.

    Returns ``(s, hit)``. The bracket is found by marching at ``step`` and
    closed by bisection down to floating-point resolution.
    """
    o = np.asarray(origins, dtype=float).reshape(-1, 3)
    d = np.asarray(dirs, dtype=float).reshape(-1, 3)
    n = len(o)
    off = np.broadcast_to(np.asarray(offset, dtype=float), (n,))
    if n == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)

    def f(s, rows=slice(None)):
        pts = o[rows, None, :] + s[..., None] * d[rows, None, :] if s.ndim == 2 else o[rows] + s[:, None] * d[rows]
        if s.ndim == 2:
            return pts[..., 2] - terrain.height(pts[..., 0], pts[..., 1]) - off[rows, None]
        return pts[:, 2] - terrain.height(pts[:, 0], pts[:, 1]) - off[rows]

    grid = np.arange(0.0, max_range + step, step)
    grid[-1] = min(grid[-1], max_range)
    vals = f(np.broadcast_to(grid, (n, len(grid))))
    below = vals <= 0.0
    first = np.argmax(below, axis=1)
    hit = below[np.arange(n), first] & (first > 0)
    rows = np.flatnonzero(hit)
    s = np.full(n, np.nan)
    if len(rows) == 0:
        return s, hit
    lo = grid[first[rows] - 1].copy()
    hi = grid[first[rows]].copy()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        done = (mid <= lo) | (mid >= hi)
        if np.all(done):
            break
        fm = f(mid, rows)
        pos = fm > 0.0
        lo = np.where(pos & ~done, mid, lo)
        hi = np.where(~pos & ~done, mid, hi)
    s[rows] = 0.5 * (lo + hi)
    return s, hit


def trajectory_kinematics(spec: ScenarioSpec, times) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Planned horizontal position, altitude and attitude quaternion at ``times``."""
    tr = spec.trajectory
    times = np.asarray(times, dtype=float)
    start = np.array(tr.start, dtype=float)
    end = np.array(tr.end, dtype=float)
    horiz = end[:2] - start[:2]
    length = float(np.linalg.norm(horiz))
    heading = horiz / length
    yaw = math.atan2(heading[1], heading[0])
    dist = np.minimum(times * tr.speed, length)
    xy = start[:2] + dist[:, None] * heading
    if tr.altitude_mode == "constant-z":
        z = start[2] + (end[2] - start[2]) * dist / length
    else:
        z = spec.terrain.height(xy[:, 0], xy[:, 1]) + tr.agl
    w = tr.attitude_wobble
    quats = np.array(
        [
            quat_from_euler(w * math.sin(TWO_PI * 0.5 * t), w * math.sin(TWO_PI * 0.3 * t + 1.0), yaw)
            for t in times.tolist()
        ]
    ).reshape(-1, 4)
    return xy, z, quats


def pose_times(spec: ScenarioSpec, n_frames: int) -> np.ndarray:
    rd = spec.radar
    t_last = n_frames / rd.frame_rate
    n_pose = int(math.ceil(t_last * rd.pose_rate - 1e-9)) + 1
    return np.arange(n_pose) / rd.pose_rate


def _trajectory_track(spec: ScenarioSpec, n_frames: int) -> PoseTrack:
    times = pose_times(spec, n_frames)
    xy, z, quats = trajectory_kinematics(spec, times)
    return PoseTrack(times, quats, np.column_stack([xy, z]), max_gap=0.1)


def scenario_frame_count(spec: ScenarioSpec) -> int:
    tr = spec.trajectory
    length = math.dist(tr.start[:2], tr.end[:2])
    return int(math.floor(length / tr.speed * spec.radar.frame_rate + 1e-9))


def simulate_frame(spec: ScenarioSpec, track: PoseTrack, frame_index: int) -> RadarScanFrame:
    """Returns of revolution ``frame_index`` seen from the poses in ``track``."""
    rd, cl, terrain = spec.radar, spec.clutter, spec.terrain
    seed = int(spec.seed)
    dt = 1.0 / rd.frame_rate
    t_start = frame_index * dt
    t_end = (frame_index + 1) * dt
    S = rd.steps_per_rev
    step_times = t_start + np.arange(S) * (dt / S)
    step_thetas = np.arange(S) * rd.angular_step
    mount = rd.mount

    def cast(step_idx, dirs_radar, offset):
        ts = step_times[step_idx]
        th = step_thetas[step_idx]
        R_b, t_b = track.poses_at(ts)
        R_chain = np.einsum("nij,jk,nkl->nil", R_b, mount.rotation, spin(th))
        origins = np.einsum("nij,j->ni", R_b, mount.translation) + t_b
        dirs_w = np.einsum("nij,nj->ni", R_chain, dirs_radar)
        s, hit = intersect_rays(terrain, origins, dirs_w, rd.max_range, offset)
        return s, hit, origins, dirs_w

    beams = Stream(seed, _S_BEAMS, frame_index)
    B = rd.beams_per_step
    g_step = np.repeat(np.arange(S), B)
    g_dirs = _cone_directions(beams, S * B, rd.beam_cone_half_angle, rd.boresight_tilt)
    g_s, g_hit, _, _ = cast(g_step, g_dirs, 0.0)
    g_range = g_s
    if cl.range_noise_sigma > 0.0:
        g_range = g_s + Stream(seed, _S_NOISE, frame_index).normal(cl.range_noise_sigma, S * B)

    veg = Stream(seed, _S_VEG, frame_index)
    n_veg = veg.poisson(cl.vegetation_rate)
    v_step = veg.integers(S, n_veg)
    v_dirs = _cone_directions(veg, n_veg, rd.beam_cone_half_angle, rd.boresight_tilt)
    v_height = veg.uniform_range(*cl.vegetation_height_range, size=n_veg)
    v_s, v_hit, _, _ = cast(v_step, v_dirs, v_height)

    mp = Stream(seed, _S_MULTIPATH, frame_index)
    n_mp = mp.poisson(cl.multipath_rate)
    m_step = mp.integers(S, n_mp)
    m_dirs = _cone_directions(mp, n_mp, rd.beam_cone_half_angle, rd.boresight_tilt)
    m_depth = mp.uniform_range(*cl.multipath_depth_range, size=n_mp)
    m_s, m_hit, m_o, m_d = cast(m_step, m_dirs, -m_depth)
    if n_mp:
        m_x = m_o[:, 0] + np.nan_to_num(m_s) * m_d[:, 0]
        m_hit &= m_x >= cl.multipath_x_min

    keep_g = g_hit & (g_range > 0.0)
    step_idx = np.concatenate([g_step[keep_g], v_step[v_hit], m_step[m_hit]])
    ranges = np.concatenate([g_range[keep_g], v_s[v_hit], m_s[m_hit]])
    dirs = np.concatenate([g_dirs[keep_g], v_dirs[v_hit], m_dirs[m_hit]])
    labels = np.concatenate(
        [np.full(int(keep_g.sum()), GROUND), np.full(int(v_hit.sum()), CLUTTER), np.full(int(m_hit.sum()), CLUTTER)]
    ).astype(np.int8)
    order = np.argsort(step_idx, kind="stable")
    step_idx = step_idx[order]
    return RadarScanFrame(
        frame_index,
        t_start,
        t_end,
        step_times[step_idx],
        step_thetas[step_idx],
        ranges[order, None] * dirs[order],
        labels[order],
    )


def generate_scenario(spec: ScenarioSpec) -> tuple[PoseTrack, list[RadarScanFrame]]:
    spec.validate()
    n_frames = scenario_frame_count(spec)
    track = _trajectory_track(spec, n_frames)
    frames = [simulate_frame(spec, track, f) for f in range(n_frames)]
    return track, frames


# -- scenario.cfg ---------------------------------------------------------------


def scenario_to_text(spec: ScenarioSpec) -> str:
    tr, rd, cl = spec.trajectory, spec.radar, spec.clutter
    rows = [
        ("name", spec.name),
        ("seed", int(spec.seed)),
        ("terrain", spec.terrain.to_text()),
        ("vegetation_rate", float(cl.vegetation_rate)),
        ("vegetation_height_range", tuple(map(float, cl.vegetation_height_range))),
        ("multipath_rate", float(cl.multipath_rate)),
        ("multipath_depth_range", tuple(map(float, cl.multipath_depth_range))),
        ("multipath_x_min", float(cl.multipath_x_min)),
        ("range_noise_sigma", float(cl.range_noise_sigma)),
        ("start", tuple(map(float, tr.start))),
        ("end", tuple(map(float, tr.end))),
        ("speed", float(tr.speed)),
        ("altitude_mode", tr.altitude_mode),
        ("agl", float(tr.agl)),
        ("attitude_wobble", float(tr.attitude_wobble)),
        ("angular_step", float(rd.angular_step)),
        ("beams_per_step", int(rd.beams_per_step)),
        ("beam_cone_half_angle", float(rd.beam_cone_half_angle)),
        ("boresight_tilt", float(rd.boresight_tilt)),
        ("max_range", float(rd.max_range)),
        ("frame_rate", float(rd.frame_rate)),
        ("pose_rate", float(rd.pose_rate)),
        ("mount_translation", tuple(map(float, rd.mount_translation))),
    ]
    lines = ["# terrafollow scenario (SI units, angles in radians)"]
    lines += [f"{k} = {format_value(v)}" for k, v in rows]
    return "\n".join(lines) + "\n"


_SCENARIO_KEYS = {
    "name": ("", str),
    "seed": ("", int),
    "terrain": ("", parse_terrain),
    "vegetation_rate": ("clutter", parse_float),
    "vegetation_height_range": ("clutter", lambda s: parse_floats(s, 2)),
    "multipath_rate": ("clutter", parse_float),
    "multipath_depth_range": ("clutter", lambda s: parse_floats(s, 2)),
    "multipath_x_min": ("clutter", parse_float),
    "range_noise_sigma": ("clutter", parse_float),
    "start": ("trajectory", lambda s: parse_floats(s, 3)),
    "end": ("trajectory", lambda s: parse_floats(s, 3)),
    "speed": ("trajectory", parse_float),
    "altitude_mode": ("trajectory", str),
    "agl": ("trajectory", parse_float),
    "attitude_wobble": ("trajectory", parse_float),
    "angular_step": ("radar", parse_float),
    "beams_per_step": ("radar", int),
    "beam_cone_half_angle": ("radar", parse_float),
    "boresight_tilt": ("radar", parse_float),
    "max_range": ("radar", parse_float),
    "frame_rate": ("radar", parse_float),
    "pose_rate": ("radar", parse_float),
    "mount_translation": ("radar", lambda s: parse_floats(s, 3)),
}


def scenario_from_entries(entries, path=None, base: ScenarioSpec | None = None) -> ScenarioSpec:
    spec = base or ScenarioSpec()
    parts = {"clutter": {}, "trajectory": {}, "radar": {}, "": {}}
    for key, value, line_no in entries:
        if key not in _SCENARIO_KEYS:
            raise ConfigError(
                f"unknown scenario key {key!r}; valid keys: {', '.join(sorted(_SCENARIO_KEYS))}", path, line_no, key
            )
        group, conv = _SCENARIO_KEYS[key]
        try:
            parts[group][key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", path, line_no, key) from None
    spec = replace(
        spec,
        clutter=replace(spec.clutter, **parts["clutter"]),
        trajectory=replace(spec.trajectory, **parts["trajectory"]),
        radar=replace(spec.radar, **parts["radar"]),
        **parts[""],
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None
    return spec


def read_scenario(path) -> ScenarioSpec:
    return scenario_from_entries(read_kv(path), path)
