import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from terrafollow.bench import REPORT_HEADER
from terrafollow.cli import main
from terrafollow.config import PipelineConfig, load_config
from terrafollow.dataset import read_dataset, read_dataset_spec
from terrafollow.errors import ConfigError
from terrafollow.metrics import compute_metrics, pooled
from terrafollow.pipeline import WindowScorer, run_pipeline, surface_prior
from terrafollow.sim import ClutterModel, Flat, ScenarioSpec, Trajectory, scenario_to_text
from terrafollow.surface import ControlLattice, ControlPoint, fit_surface

# -- configuration ----------------------------------------------------------------------


def test_defaults_round_trip():
    cfg = PipelineConfig()
    assert PipelineConfig.from_text(cfg.to_text()) == cfg


def test_unknown_key_names_key_and_line(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("K = 4\n# comment\nwindow_size = 3\n")
    with pytest.raises(ConfigError) as err:
        load_config(p)
    assert "window_size" in str(err.value) and ":3:" in str(err.value)


def test_invalid_value_reports_line(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("rho = 1.5\n")
    with pytest.raises(ConfigError, match=":1:.*rho"):
        load_config(p)
    p.write_text("K = three\n")
    with pytest.raises(ConfigError, match="K"):
        load_config(p)


def test_overrides_apply_last(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("seed = 4\nK = 2\n")
    cfg = load_config(p, seed=9, K=None)
    assert (cfg.seed, cfg.K) == (9, 2)


def test_validation():
    for bad in (dict(phi_deg=0.0), dict(rho=0.0), dict(K=0), dict(tau_c=-1.0), dict(seed=-1)):
        with pytest.raises(ConfigError):
            PipelineConfig(**bad)


config_changes = st.fixed_dictionaries(
    {},
    optional={
        "phi_deg": st.floats(0.5, 90.0),
        "K": st.integers(1, 20),
        "s": st.floats(0.05, 10.0),
        "tau_d": st.floats(1e-4, 2.0),
        "rho": st.floats(0.01, 0.99),
        "tau_c": st.floats(0.0, 1.0),
        "k_x": st.integers(0, 5),
        "use_prior_seeds": st.booleans(),
        "seed": st.integers(0, 2**64 - 1),
        "delta_recall": st.floats(1e-3, 1e6),
    },
)


@pytest.mark.property
@given(config_changes)
def test_config_text_round_trip(changes):
    cfg = PipelineConfig().replace(**changes)
    assert PipelineConfig.from_text(cfg.to_text()) == cfg


# -- pipeline ---------------------------------------------------------------------------


def _flat_spec(seed=0, clutter=None, length=8.0):
    tr = Trajectory(start=(0.0, 0.0, 6.0), end=(length, 0.0, 6.0), agl=6.0)
    return ScenarioSpec(terrain=Flat(0.0), clutter=clutter or ClutterModel(), trajectory=tr, seed=seed, name="tiny")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "tiny.txt"
    spec.write_text(scenario_to_text(_flat_spec(clutter=ClutterModel(vegetation_rate=20.0))))
    assert main(["simulate", str(spec), "--out", str(root / "ds"), "--quiet"]) == 0
    return root


def test_cold_start_first_frame_has_output(dataset):
    track, frames = read_dataset(dataset / "ds")
    pipe, outs = run_pipeline(frames[:3], track, PipelineConfig(), read_dataset_spec(dataset / "ds").radar.mount)
    assert outs[0].segmentation.ground.any()
    assert np.isfinite(outs[0].z_cmd) and abs(outs[0].z_terr) < 0.05
    assert len(pipe.scored) == 3


def test_prior_total_outside_domain():
    pts = [ControlPoint(u, v, u + 0.5, v + 0.5, 0.1 * u) for u in range(4) for v in range(3)]
    prior = surface_prior(fit_surface(ControlLattice.from_points(1.0, pts)), 2.0)
    x = np.array([-50.0, 1.0, 3.6, 4.0, 100.0])
    z = prior.heights(x, np.full(5, 1.5))
    assert np.all(np.isfinite(z))
    # linear continuation for 2 m past the last centre, constant beyond
    assert z[-1] == pytest.approx(0.1 * (3.0 + 2.0)) and z[0] == pytest.approx(-0.2)
    assert z[3] == pytest.approx(0.35) and z[1] == pytest.approx(0.05)


def test_window_scorer_finalizes_on_exit():
    sc = WindowScorer()
    lab = np.array([1, 0, 1])
    sc.update(0, lab, np.array([0, 1]), np.array([True, False]), np.array([0, 0]))
    assert sc.scored == []
    sc.update(1, lab, np.array([0, 2]), np.array([False, True, True, True]), np.array([0, 0, 1, 1]))
    sc.update(2, lab, np.array([0]), np.array([True, False, True]), np.array([1, 1, 2]))
    assert [s.frame_index for s in sc.scored] == [0]
    assert sc.scored[0].pred.tolist() == [False, True, False]
    done = sc.flush()
    assert [s.frame_index for s in done] == [0, 1, 2]
    assert done[1].pred.tolist() == [True, False, False]


# -- command line -----------------------------------------------------------------------


def test_simulate_is_byte_identical(dataset, tmp_path):
    spec = dataset / "tiny.txt"
    assert main(["simulate", str(spec), "--out", str(tmp_path / "again"), "--quiet"]) == 0
    for f in sorted((dataset / "ds").rglob("*")):
        if f.is_file():
            rel = f.relative_to(dataset / "ds")
            assert (tmp_path / "again" / rel).read_bytes() == f.read_bytes()


def test_pipeline_outputs(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["pipeline", str(dataset / "ds"), "--out", str(out), "--quiet"]) == 0
    rows = np.loadtxt(out / "altitude.txt", comments="#", ndmin=2)
    assert rows.shape[1] == 6
    assert np.max(np.abs(rows[:, 3])) < 0.05
    assert np.allclose(rows[:, 4] - rows[:, 3], 3.0)
    assert (out / "control_lattice.txt").exists() and (out / "terrain_grid.txt").exists()
    seg = sorted((out / "segmentation").glob("frame_*.txt"))
    assert len(seg) == len(rows)
    summary = (out / "summary.txt").read_text()
    assert "f1 = " in summary and "# K = 5" in summary


def test_segment_matches_library(dataset, tmp_path):
    assert main(["segment", str(dataset / "ds"), "--out", str(tmp_path), "--quiet"]) == 0
    track, frames = read_dataset(dataset / "ds")
    pipe, _ = run_pipeline(frames, track, PipelineConfig(), read_dataset_spec(dataset / "ds").radar.mount)
    f1 = pooled(compute_metrics(s.pred, s.labels) for s in pipe.scored).f1
    line = next(ln for ln in (tmp_path / "summary.txt").read_text().splitlines() if ln.startswith("f1 = "))
    assert float(line.split("=")[1]) == f1
    assert not (tmp_path / "altitude.txt").exists()


def test_invalid_config_key_exits_1(dataset, tmp_path, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("bogus_key = 1\n")
    rc = main(["pipeline", str(dataset / "ds"), "--out", str(tmp_path / "o"), "--config", str(cfg)])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("terrafollow pipeline: error:") and "bogus_key" in err


def test_missing_pose_file_exits_1(dataset, tmp_path, capsys):
    import shutil

    shutil.copytree(dataset / "ds", tmp_path / "ds")
    (tmp_path / "ds" / "poses.txt").unlink()
    assert main(["pipeline", str(tmp_path / "ds"), "--out", str(tmp_path / "o")]) == 1
    assert "poses.txt" in capsys.readouterr().err


def test_bench_schema_and_unknown_method(dataset, tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", str(dataset / "ds"), "--methods", "proposed,bsp,knn", "--out", str(out), "--quiet"]) == 0
    lines = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")]
    assert lines[0] == REPORT_HEADER
    assert [ln.split(",")[1] for ln in lines[1:]] == ["proposed", "bsp", "knn"]
    assert main(["bench", str(dataset / "ds"), "--methods", "lidar"]) == 1
    assert "lidar" in capsys.readouterr().err


def test_ablate_four_rows(dataset, tmp_path):
    out = tmp_path / "abl.csv"
    assert main(["ablate", str(dataset / "ds"), "--out", str(out), "--quiet"]) == 0
    rows = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")]
    assert rows[0].startswith("config,") and [r.split(",")[0] for r in rows[1:]] == ["baseline", "+TI", "+TI+PSI", "full"]


def test_model_query(tmp_path, capsys, rng):
    xy = rng.uniform(0.0, 6.0, (600, 2))
    pts = tmp_path / "g.txt"
    np.savetxt(pts, np.column_stack([xy, 1.0 + 0.1 * xy[:, 0]]))
    assert main(["model", str(pts), "--query", "3,3", "--out", str(tmp_path / "m"), "--quiet"]) == 0
    x, y, z, ex = capsys.readouterr().out.split()
    assert float(z) == pytest.approx(1.3, abs=0.02) and ex == "0"
    assert (tmp_path / "m" / "terrain_grid.txt").exists()


def test_usage_errors_exit_2_and_entry_point():
    with pytest.raises(SystemExit) as exc:
        main(["simulate"])
    assert exc.value.code == 2
    proc = subprocess.run([sys.executable, "-m", "terrafollow.cli", "pipeline", "/nonexistent", "--out", "/tmp/x"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "terrafollow pipeline: error:" in proc.stderr
