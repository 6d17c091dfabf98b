"""Command-line interface: ``terrafollow <command> ...``.

Flags override config-file values, which override defaults. Every command
exits 0 on success and 1 after printing an error; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .bench import (
    METHODS,
    SCENARIOS,
    ALTITUDES,
    BenchInput,
    generate_inputs,
    run_ablation,
    run_benchmark,
    scenario_preset,
    standard_suite,
)
from .config import PipelineConfig, load_config
from .dataset import read_dataset, read_dataset_spec, write_dataset
from .errors import Degenerate, TerrafollowError
from .kvfile import atomic_write_text
from .metrics import compute_metrics, pooled
from .pipeline import TerrainPipeline
from .sim import RadarConfig, generate_scenario, read_scenario
from .surface import ControlLattice, dense_grid_lines, fit_surface, make_control_points
from .preprocessing import grid_index
from .segmentation import pca_plane


def _log(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _config(args) -> PipelineConfig:
    return load_config(args.config, seed=args.seed)


def _dataset_input(path) -> BenchInput:
    track, frames = read_dataset(path)
    spec = read_dataset_spec(path)
    return BenchInput(Path(path).name, track, frames, spec)


def _mount(spec):
    return (spec.radar if spec is not None else RadarConfig()).mount


# -- commands ---------------------------------------------------------------------


def cmd_simulate(args) -> int:
    if (args.spec is None) == (args.preset is None):
        raise TerrafollowError("give exactly one of a scenario file or --preset")
    if args.spec is not None:
        spec = read_scenario(args.spec)
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
    else:
        alt = args.altitude if args.altitude is not None else ALTITUDES[args.preset][0]
        spec = scenario_preset(args.preset, alt, args.seed or 0, args.noise)
    track, frames = generate_scenario(spec)
    write_dataset(args.out, track, frames, spec)
    _log(args, f"wrote {len(frames)} frames to {args.out}")
    return 0


def _run(args, write_terrain: bool) -> int:
    cfg = _config(args)
    track, frames = read_dataset(args.dataset)
    spec = read_dataset_spec(args.dataset)
    out = Path(args.out)
    (out / "segmentation").mkdir(parents=True, exist_ok=True)
    pipe = TerrainPipeline(cfg, _mount(spec))
    log = ["# t x y z_terr z_cmd extrapolated"]
    failures = 0
    for frame in frames:
        try:
            res = pipe.process(frame, track)
        except TerrafollowError as exc:
            failures += 1
            print(f"frame {frame.frame_index}: {exc}", file=sys.stderr)
            continue
        dump = res.segmentation.dump_lines()
        header = "# u v n_x n_y n_z d zbar sigma phi reasons count_ground count_total"
        atomic_write_text(out / "segmentation" / f"frame_{frame.frame_index:06d}.txt", "\n".join([header] + dump) + "\n")
        log.append(res.log_line())
    pipe.flush()
    summary = [f"frames = {len(frames)}", f"failed_frames = {failures}"]
    labelled = [s for s in pipe.scored if len(s.labels) and np.all(s.labels >= 0)]
    if labelled:
        m = pooled(compute_metrics(s.pred, s.labels) for s in labelled)
        summary += [f"precision = {m.precision!r}", f"recall = {m.recall!r}", f"iou = {m.iou!r}", f"f1 = {m.f1!r}"]
    if write_terrain:
        atomic_write_text(out / "altitude.txt", "\n".join(log) + "\n")
        if pipe.surface is not None:
            atomic_write_text(out / "control_lattice.txt", "# u v x y h\n" + "\n".join(pipe.lattice.lines()) + "\n")
            grid = dense_grid_lines(pipe.surface, cfg.dense_step)
            atomic_write_text(out / "terrain_grid.txt", "# x y z\n" + "\n".join(grid) + "\n")
            summary.append(f"control_points = {len(pipe.lattice.points)}")
    atomic_write_text(out / "summary.txt", "\n".join(cfg.comment_lines() + summary) + "\n")
    for line in summary:
        _log(args, line)
    return 0


def cmd_pipeline(args) -> int:
    return _run(args, write_terrain=True)


def cmd_segment(args) -> int:
    return _run(args, write_terrain=False)


def cmd_model(args) -> int:
    """Fit the terrain surface to ground points ``x y z`` and export it or query it."""
    cfg = _config(args)
    pts = np.loadtxt(args.points, comments="#", ndmin=2)
    if pts.shape[1] != 3:
        raise TerrafollowError(f"{args.points}: expected 3 columns 'x y z', got {pts.shape[1]}")
    keys = grid_index(pts[:, :2], cfg.s)
    cells: dict = {}
    for key, p in zip(map(tuple, keys.tolist()), pts):
        cells.setdefault(key, []).append(p)
    cells = {k: np.array(v) for k, v in cells.items()}
    grads = None
    if cfg.slope_compensation:
        # cell gradient from its own plane where one can be fitted
        grads = {}
        for key, p in cells.items():
            try:
                n = pca_plane(p).normal
            except Degenerate:
                continue
            grads[key] = (-n[0] / n[2], -n[1] / n[2]) if n[2] > 0.0 else (0.0, 0.0)
    lattice = ControlLattice.from_points(cfg.s, make_control_points(cells, cfg.s, cfg.rho, 0, grads))
    surface = fit_surface(lattice, cfg.k_x, cfg.k_y)
    for q in args.query or []:
        x, y = (float(v) for v in q.split(","))
        z, extrap = surface.query(x, y)
        print(f"{x!r} {y!r} {z!r} {int(extrap)}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out / "control_lattice.txt", "# u v x y h\n" + "\n".join(lattice.lines()) + "\n")
        grid = dense_grid_lines(surface, cfg.dense_step)
        atomic_write_text(out / "terrain_grid.txt", "# x y z\n" + "\n".join(grid) + "\n")
        _log(args, f"{len(lattice.points)} control points written to {out}")
    return 0


def _inputs(args) -> list[BenchInput]:
    if args.standard_suite == bool(args.datasets):
        raise TerrafollowError("give dataset directories or --standard-suite (not both)")
    if args.standard_suite:
        scen = args.scenarios.split(",") if args.scenarios else list(SCENARIOS)
        for s in scen:
            if s not in SCENARIOS:
                raise TerrafollowError(f"unknown scenario {s!r}; valid scenarios: {', '.join(SCENARIOS)}")
        return generate_inputs(standard_suite(args.seed or 0, args.noise, scen))
    return [_dataset_input(p) for p in args.datasets]


def cmd_bench(args) -> int:
    methods = args.methods.split(",") if args.methods else list(METHODS)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise TerrafollowError(f"unknown method(s) {', '.join(bad)}; valid methods: {', '.join(METHODS)}")
    cfg = _config(args)
    report = run_benchmark(_inputs(args), methods, cfg)
    if args.out is not None:
        atomic_write_text(args.out, report.csv_text())
    _log(args, report.table_text().rstrip())
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    report = run_ablation(_inputs(args), cfg)
    text = report.text()
    if args.out is not None:
        atomic_write_text(args.out, "\n".join(cfg.comment_lines()) + "\n" + text)
    _log(args, text.rstrip())
    return 0


# -- parser -------------------------------------------------------------------------


def _u64(text: str) -> int:
    v = int(text, 10)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=_u64, help="RNG seed (overrides the config/scenario seed)")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(prog="terrafollow", description="Radar terrain following toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    p.add_argument("spec", nargs="?", help="scenario file")
    p.add_argument("--preset", choices=SCENARIOS, help="standard scenario instead of a file")
    p.add_argument("--altitude", type=float, help="flight height above ground for --preset")
    p.add_argument("--noise", type=float, default=0.05, help="range noise sigma for --preset (m)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_simulate)

    for name, func, text in (
        ("pipeline", cmd_pipeline, "segmentation, terrain model and altitude commands"),
        ("segment", cmd_segment, "per-frame ground segmentation dumps only"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("dataset", help="dataset directory")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)

    p = sub.add_parser("model", parents=[common], help="fit and query a terrain surface from ground points")
    p.add_argument("points", help="text file of 'x y z' ground points")
    p.add_argument("--query", action="append", metavar="X,Y", help="print the height at X,Y (repeatable)")
    p.add_argument("--out", help="directory for lattice and grid exports")
    p.set_defaults(func=cmd_model)

    for name, func, text in (
        ("bench", cmd_bench, "compare against the baselines"),
        ("ablate", cmd_ablate, "component ablation table"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("datasets", nargs="*", help="dataset directories")
        p.add_argument("--standard-suite", action="store_true", help="generate the 4 x 3 standard scenarios")
        p.add_argument("--scenarios", help="comma-separated subset of the standard suite")
        p.add_argument("--noise", type=float, default=0.05, help="range noise sigma for the standard suite (m)")
        p.add_argument("--out", help="output file")
        if name == "bench":
            p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TerrafollowError, OSError, ValueError) as exc:
        print(f"terrafollow {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
