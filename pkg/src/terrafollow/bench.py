"""Benchmark harness: standard synthetic suite, method comparison, ablation, closed-loop follow."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .baselines import KnnTerrain, PolyTerrain, ransac_patch, ransac_single
from .config import PipelineConfig
from .errors import Degenerate, TerrafollowError
from .geometry import PoseTrack
from .metrics import SegMetrics, compute_metrics, pooled, rmse
from .pipeline import TerrainPipeline, WindowScorer
from .preprocessing import partition
from .sim import (
    ClutterModel,
    Composite,
    Flat,
    Hill,
    RadarConfig,
    RadarScanFrame,
    Ramp,
    ScenarioSpec,
    Slope,
    Trajectory,
    generate_scenario,
    pose_times,
    scenario_frame_count,
    scenario_to_text,
    simulate_frame,
    trajectory_kinematics,
)
from .surface import TerrainSurface

SEG_METHODS = ("proposed", "ransac_single", "ransac_patch")
TERRAIN_METHODS = ("bsp", "knn", "poly")
METHODS = SEG_METHODS + TERRAIN_METHODS
REPORT_HEADER = "scenario,method,precision,recall,iou,f1,rmse_m,lat_mean_ms,lat_p95_ms"

SCENARIOS = ("flat", "slope", "water", "hill")
ALTITUDES = {"flat": (3.0, 5.0, 8.0), "slope": (5.0, 8.0, 10.0), "water": (3.0, 6.0, 10.0), "hill": (18.0, 20.0, 22.0)}


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("TERRAFOLLOW_THREADS", "1")))
    except ValueError:
        return 1


# -- standard suite -------------------------------------------------------------


def scenario_preset(name: str, altitude: float, seed: int = 0, noise: float = 0.05) -> ScenarioSpec:
    """One of the four canonical scenarios flown at ``altitude`` m above ground."""
    traj = dict(start=(0.0, 0.0, 0.0), end=(40.0, 0.0, 0.0), speed=5.0, altitude_mode="constant-agl", agl=altitude)
    radar = RadarConfig()
    if name == "flat":
        # field with gentle micro-relief and low crops
        terrain = Composite([Flat(0.0), Hill(0.12, 10.0, 0.0)])
        traj.update(start=(0.0, 2.5, 0.0), end=(40.0, 2.5, 0.0))
        clutter = ClutterModel(vegetation_rate=120.0, range_noise_sigma=noise)
    elif name == "slope":
        terrain = Composite([Slope(0.15, 0.03, 0.0), Hill(0.25, 16.0, 0.0)])
        clutter = ClutterModel(vegetation_rate=80.0, range_noise_sigma=noise)
    elif name == "water":
        # bank, then a shallow step down into a pond with strong multipath
        terrain = Ramp(8.0, 2.0, 0.6)
        clutter = ClutterModel(
            vegetation_rate=20.0,
            multipath_rate=300.0,
            multipath_depth_range=(0.6, 3.0),
            multipath_x_min=11.0,
            range_noise_sigma=noise,
        )
    elif name == "hill":
        # tea-plantation hill: flown along a ridge line, dense canopy clutter
        terrain = Composite([Hill(2.5, 50.0, 0.0), Slope(0.05, 0.0, 0.0)])
        traj.update(start=(0.0, 12.5, 0.0), end=(40.0, 12.5, 0.0))
        clutter = ClutterModel(vegetation_rate=250.0, vegetation_height_range=(0.4, 1.2), range_noise_sigma=noise)
        radar = RadarConfig(beams_per_step=16)
    else:
        raise ValueError(f"unknown scenario {name!r}; expected one of {', '.join(SCENARIOS)}")
    tag = f"{name}@{altitude:g}m"
    return ScenarioSpec(terrain, clutter, Trajectory(**traj), radar, seed, tag)


def standard_suite(seed: int = 0, noise: float = 0.05, scenarios=SCENARIOS) -> list[ScenarioSpec]:
    out = []
    for i, name in enumerate(scenarios):
        for j, alt in enumerate(ALTITUDES[name]):
            out.append(scenario_preset(name, alt, seed + 10 * i + j, noise))
    return out


def scenario_group(spec_name: str) -> str:
    return spec_name.split("@", 1)[0]


@dataclass(eq=False)
class BenchInput:
    name: str
    track: PoseTrack
    frames: list
    spec: Optional[ScenarioSpec] = None


_GEN_CACHE: dict[str, tuple] = {}


def generate_cached(spec: ScenarioSpec):
    key = scenario_to_text(spec)
    if key not in _GEN_CACHE:
        _GEN_CACHE[key] = generate_scenario(spec)
    return _GEN_CACHE[key]


def generate_inputs(specs, threads: Optional[int] = None) -> list[BenchInput]:
    threads = threads or thread_cap()
    specs = list(specs)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(generate_cached, specs))
    else:
        results = [generate_cached(s) for s in specs]
    return [BenchInput(s.name, tr, fr, s) for s, (tr, fr) in zip(specs, results)]


# -- per-run evaluation ---------------------------------------------------------


@dataclass(eq=False)
class MethodResult:
    metrics: Optional[SegMetrics] = None
    rmse_m: float = math.nan
    latencies_s: list = field(default_factory=list)
    failures: int = 0

    @property
    def lat_mean_ms(self) -> float:
        return 1e3 * float(np.mean(self.latencies_s)) if self.latencies_s else math.nan

    @property
    def lat_p95_ms(self) -> float:
        return 1e3 * float(np.percentile(self.latencies_s, 95)) if self.latencies_s else math.nan


@dataclass(eq=False)
class RunResult:
    name: str
    methods: dict
    pipeline: Optional[TerrainPipeline] = None


def terrain_samples(surface: TerrainSurface, truth: Callable, n: int, seed: int) -> np.ndarray:
    """Truth samples: every observed cell centre plus ``n`` uniform points inside observed cells."""
    keys = np.array(sorted(surface.lattice.points.keys()), dtype=float).reshape(-1, 2)
    s = surface.s
    rng = np.random.default_rng(seed)
    pick = keys[rng.integers(len(keys), size=n)]
    pts = np.concatenate([(keys + 0.5) * s, (pick + rng.random((n, 2))) * s])
    return np.column_stack([pts, truth(pts[:, 0], pts[:, 1])])


def _time_queries(query, xs, ys) -> list:
    out = []
    clock = time.perf_counter
    for x, y in zip(xs, ys):
        t0 = clock()
        query(x, y)
        out.append(clock() - t0)
    return out


def terrain_models(surface: TerrainSurface, config: PipelineConfig) -> dict:
    pts = list(surface.lattice.points.values())
    xy = np.array([(p.x, p.y) for p in pts])
    h = np.array([p.h for p in pts])
    models = {"bsp": surface}
    try:
        models["knn"] = KnnTerrain(xy, h, config.knn_k, config.knn_power)
    except TerrafollowError:
        pass
    try:
        models["poly"] = PolyTerrain(xy, h)
    except TerrafollowError:
        pass
    return models


def _batch(model):
    if isinstance(model, TerrainSurface):
        return lambda x, y: model.query_batch(x, y)[0]
    return model.query_batch


def _scalar(model):
    return model.query


def run_single(inp: BenchInput, config: PipelineConfig, methods=METHODS, latency_queries: int = 2000) -> RunResult:
    """Run every requested method over one flight."""
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s) {unknown}; valid methods: {', '.join(METHODS)}")
    mount = (inp.spec.radar if inp.spec is not None else RadarConfig()).mount
    pipe = TerrainPipeline(config, mount)
    rparams = config.ransac_params()
    scorers = {m: WindowScorer() for m in SEG_METHODS if m in methods and m != "proposed"}
    res = {m: MethodResult() for m in methods}
    warm = config.warmup_frames
    for n, frame in enumerate(inp.frames):
        try:
            out = pipe.process(frame, inp.track)
        except TerrafollowError:
            for r in res.values():
                r.failures += 1
            continue
        if "proposed" in res and n >= warm:
            res["proposed"].latencies_s.append(out.latency_s)
        cloud = out.cloud
        for m, scorer in scorers.items():
            t0 = time.perf_counter()
            try:
                if m == "ransac_single":
                    idx = ransac_single(cloud.xyz, replace(rparams, seed=rparams.seed + frame.frame_index))
                else:
                    part = partition(cloud, config.s)
                    idx = ransac_patch(part, replace(rparams, seed=rparams.seed + frame.frame_index))
            except Degenerate:
                idx = np.zeros(0, dtype=np.int64)
                res[m].failures += 1
            dt = time.perf_counter() - t0
            if n >= warm:
                res[m].latencies_s.append(dt)
            ground = np.zeros(len(cloud), dtype=bool)
            ground[idx] = True
            scorer.update(frame.frame_index, out.frame_points.labels, out.kept, ground, cloud.source_frame)
    pipe.flush()
    if "proposed" in res:
        res["proposed"].metrics = _score(pipe.scored)
    for m, scorer in scorers.items():
        res[m].metrics = _score(scorer.flush())

    wanted = [m for m in TERRAIN_METHODS if m in methods]
    if wanted and pipe.surface is not None:
        models = terrain_models(pipe.surface, config)
        truth = inp.spec.terrain.height if inp.spec is not None else None
        samples = terrain_samples(pipe.surface, truth or (lambda x, y: np.full(len(x), np.nan)), config.rmse_samples, config.seed)
        rng = np.random.default_rng(config.seed + 1)
        q = samples[rng.integers(len(samples), size=latency_queries), :2]
        for m in wanted:
            if m not in models:
                res[m].failures += 1
                continue
            if truth is not None:
                res[m].rmse_m = rmse(_batch(models[m])(samples[:, 0], samples[:, 1]), samples[:, 2])
            res[m].latencies_s = _time_queries(_scalar(models[m]), q[:, 0].tolist(), q[:, 1].tolist())
        if "proposed" in res:
            res["proposed"].rmse_m = res["bsp"].rmse_m if "bsp" in res else math.nan
    return RunResult(inp.name, res, pipe)


def _score(scored) -> SegMetrics:
    return pooled(compute_metrics(s.pred, s.labels) for s in scored)


# -- reports --------------------------------------------------------------------


@dataclass(eq=False)
class ReportRow:
    scenario: str
    method: str
    metrics: Optional[SegMetrics]
    rmse_m: float
    lat_mean_ms: float
    lat_p95_ms: float

    def csv(self) -> str:
        m = self.metrics
        vals = [m.precision, m.recall, m.iou, m.f1] if m is not None else [math.nan] * 4
        vals += [self.rmse_m, self.lat_mean_ms, self.lat_p95_ms]
        return ",".join([self.scenario, self.method] + [_fmt(v) for v in vals])


def _fmt(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


@dataclass(eq=False)
class BenchReport:
    rows: list
    config: PipelineConfig
    runs: list = field(default_factory=list)

    def row(self, scenario: str, method: str) -> ReportRow:
        for r in self.rows:
            if r.scenario == scenario and r.method == method:
                return r
        raise KeyError((scenario, method))

    def scenarios(self) -> list[str]:
        return list(dict.fromkeys(r.scenario for r in self.rows))

    def csv_text(self) -> str:
        lines = self.config.comment_lines() + [REPORT_HEADER] + [r.csv() for r in self.rows]
        return "\n".join(lines) + "\n"

    def table_text(self) -> str:
        head = f"{'scenario':<14}{'method':<15}{'prec':>8}{'recall':>8}{'iou':>8}{'f1':>8}{'rmse_m':>9}{'lat_ms':>10}{'p95_ms':>10}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            m = r.metrics
            seg = [m.precision, m.recall, m.iou, m.f1] if m is not None else [math.nan] * 4
            cells = "".join(f"{100 * v:8.2f}" if not math.isnan(v) else f"{'-':>8}" for v in seg)
            rm = f"{r.rmse_m:9.4f}" if not math.isnan(r.rmse_m) else f"{'-':>9}"
            lat = f"{r.lat_mean_ms:10.4f}{r.lat_p95_ms:10.4f}" if not math.isnan(r.lat_mean_ms) else f"{'-':>10}{'-':>10}"
            lines.append(f"{r.scenario:<14}{r.method:<15}{cells}{rm}{lat}")
        return "\n".join(lines) + "\n"


def _rows_for(name: str, results: list[RunResult], methods) -> list[ReportRow]:
    rows = []
    for m in methods:
        per = [r.methods[m] for r in results if m in r.methods]
        metrics = [p.metrics for p in per if p.metrics is not None]
        lat = [t for p in per for t in p.latencies_s]
        rm = [p.rmse_m for p in per if not math.isnan(p.rmse_m)]
        rows.append(
            ReportRow(
                name,
                m,
                pooled(metrics) if metrics else None,
                float(np.mean(rm)) if rm else math.nan,
                1e3 * float(np.mean(lat)) if lat else math.nan,
                1e3 * float(np.percentile(lat, 95)) if lat else math.nan,
            )
        )
    return rows


def run_benchmark(inputs, methods=METHODS, config: Optional[PipelineConfig] = None, by_altitude: bool = True) -> BenchReport:
    """Per-flight rows, then pooled rows per scenario group (``flat@3m`` ... -> ``flat``)."""
    config = config or PipelineConfig()
    methods = tuple(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown method(s) {unknown}; valid methods: {', '.join(METHODS)}")
    runs = [run_single(inp, config, methods) for inp in inputs]
    rows = []
    if by_altitude:
        for r in runs:
            rows += _rows_for(r.name, [r], methods)
    groups: dict[str, list] = {}
    for r in runs:
        groups.setdefault(scenario_group(r.name), []).append(r)
    if any(len(g) > 1 or scenario_group(g[0].name) != g[0].name for g in groups.values()):
        for g, rs in groups.items():
            rows += _rows_for(g, rs, methods)
    return BenchReport(rows, config, runs)


# -- ablation -----------------------------------------------------------------------

ABLATION_STEPS = (
    ("baseline", dict(K=1, use_prior_seeds=False, use_refinement=False)),
    ("+TI", dict(use_prior_seeds=False, use_refinement=False)),
    ("+TI+PSI", dict(use_refinement=False)),
    ("full", dict()),
)


@dataclass(eq=False)
class AblationReport:
    steps: list  # (label, config)
    per_scenario: dict  # label -> {group: SegMetrics}
    overall: dict  # label -> SegMetrics

    def f1(self, label: str, group: Optional[str] = None) -> float:
        m = self.overall[label] if group is None else self.per_scenario[label][group]
        return m.f1

    def text(self) -> str:
        groups = list(next(iter(self.per_scenario.values())).keys()) if self.per_scenario else []
        flag_keys = ("K", "use_prior_seeds", "use_refinement")
        head = "config," + ",".join(flag_keys) + "," + ",".join(f"f1_{g}" for g in groups) + ",f1_overall"
        lines = [head]
        for label, cfg in self.steps:
            flags = [str(getattr(cfg, k)).lower() for k in flag_keys]
            vals = [f"{self.per_scenario[label][g].f1:.6f}" for g in groups] + [f"{self.overall[label].f1:.6f}"]
            lines.append(",".join([label] + flags + vals))
        return "\n".join(lines) + "\n"


def run_ablation(inputs, config: Optional[PipelineConfig] = None) -> AblationReport:
    config = config or PipelineConfig()
    inputs = list(inputs)
    steps, per, overall = [], {}, {}
    for label, changes in ABLATION_STEPS:
        cfg = config.replace(**changes)
        steps.append((label, cfg))
        runs = [run_single(inp, cfg, ("proposed",)) for inp in inputs]
        groups: dict[str, list] = {}
        for r in runs:
            groups.setdefault(scenario_group(r.name), []).append(r.methods["proposed"].metrics)
        per[label] = {g: pooled(ms) for g, ms in groups.items()}
        overall[label] = pooled(r.methods["proposed"].metrics for r in runs)
    return AblationReport(steps, per, overall)


# -- closed-loop terrain following --------------------------------------------------


@dataclass(eq=False)
class FollowResult:
    times: np.ndarray
    xy: np.ndarray
    z_uav: np.ndarray
    z_true: np.ndarray
    z_cmd: np.ndarray
    errors: np.ndarray  # (z_uav - z_true) - h_ref at frame boundaries

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors))

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(self.errors**2)))


def follow_terrain(spec: ScenarioSpec, config: PipelineConfig, h_ref: Optional[float] = None) -> FollowResult:
    """Fly ``spec`` with the altitude driven by the pipeline's own command.

    Kinematic vehicle: over each frame the altitude moves linearly to the
    command for the position it reaches at the frame's end, queried from the
    surface built up to the previous frame. Before any surface exists it holds
    the starting altitude.
    """
    h_ref = config.h_ref if h_ref is None else h_ref
    cfg = config.replace(h_ref=h_ref)
    rd = spec.radar
    n_frames = scenario_frame_count(spec)
    times = pose_times(spec, n_frames)
    xy, _, quats = trajectory_kinematics(spec, times)
    per_frame = int(round(rd.pose_rate / rd.frame_rate))
    z = np.empty(len(times))
    z0 = float(spec.terrain.height(np.array([xy[0, 0]]), np.array([xy[0, 1]]))[0]) + h_ref
    z[0] = z0
    pipe = TerrainPipeline(cfg, rd.mount)
    bounds = [0]
    cmds = [z0]
    for f in range(n_frames):
        a, b = f * per_frame, min((f + 1) * per_frame, len(times) - 1)
        target = z[a]
        if pipe.surface is not None:
            target, _ = pipe.surface.query(float(xy[b, 0]), float(xy[b, 1]))
            target += h_ref
        w = np.arange(1, b - a + 1) / (b - a)
        z[a + 1 : b + 1] = z[a] + w * (target - z[a])
        track = PoseTrack(times[: b + 1], quats[: b + 1], np.column_stack([xy[: b + 1], z[: b + 1]]), max_gap=0.1)
        frame = simulate_frame(spec, track, f)
        pipe.process(frame, track)
        bounds.append(b)
        cmds.append(target)
    idx = np.array(bounds)
    z_true = spec.terrain.height(xy[idx, 0], xy[idx, 1])
    errors = (z[idx] - z_true) - h_ref
    return FollowResult(times[idx], xy[idx], z[idx], z_true, np.array(cmds), errors)


# -- query latency --------------------------------------------------------------------


def query_latency(surface: TerrainSurface, config: PipelineConfig, n: int = 100_000, seed: int = 0) -> dict:
    """Mean seconds per scalar query of each terrain model over ``n`` points of the surface domain."""
    models = terrain_models(surface, config)
    xmin, xmax, ymin, ymax = surface.domain
    rng = np.random.default_rng(seed)
    xs = rng.uniform(xmin, xmax, n).tolist()
    ys = rng.uniform(ymin, ymax, n).tolist()
    out = {}
    for name, model in models.items():
        q = _scalar(model)
        q(xs[0], ys[0])
        t0 = time.perf_counter()
        for x, y in zip(xs, ys):
            q(x, y)
        out[name] = (time.perf_counter() - t0) / n
    return out
