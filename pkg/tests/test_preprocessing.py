import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from terrafollow.errors import FrameRegistrationError
from terrafollow.geometry import PoseTrack, RigidTransform
from terrafollow.preprocessing import (
    AccumulationWindow,
    PointCloud,
    RegisteredFrame,
    accumulate,
    fov_filter,
    partition,
    register_frame,
)
from terrafollow.sim import RadarScanFrame

coords = st.floats(-50.0, 50.0, allow_nan=False)
clouds = arrays(np.float64, st.tuples(st.integers(0, 200), st.just(3)), elements=coords)


def _reg(xyz, uav=(0.0, 0.0, 10.0), index=0):
    return RegisteredFrame(index, PointCloud.from_xyz(xyz, source_frame=index), np.asarray(uav, dtype=float))


# -- examples ---------------------------------------------------------------------------


def test_registration_fails_beyond_fraction():
    track = PoseTrack([0.0, 0.05], [[0, 0, 0, 1]] * 2, [[0, 0, 10]] * 2)
    ts = np.array([0.01, 0.02, 0.2, 0.3])
    frame = RadarScanFrame(0, 0.0, 0.1, ts, np.zeros(4), np.zeros((4, 3)), np.ones(4))
    with pytest.raises(FrameRegistrationError):
        register_frame(frame, track, RigidTransform.identity(), 0.1)


def test_registration_drops_failed_points_within_fraction():
    track = PoseTrack(np.arange(0.0, 0.2, 0.01), [[0, 0, 0, 1]] * 20, [[0, 0, 10]] * 20)
    ts = np.r_[np.full(19, 0.05), 0.5]
    frame = RadarScanFrame(0, 0.0, 0.1, ts, np.zeros(20), np.tile([0.0, 0.0, -1.0], (20, 1)), np.ones(20))
    reg = register_frame(frame, track, RigidTransform.identity(), 0.1)
    assert len(reg) == 19


def test_window_keeps_last_k():
    win = AccumulationWindow(3)
    for i in range(6):
        cloud = accumulate(win, _reg(np.full((i + 1, 3), float(i)), index=i))
    assert len(win) == 3
    assert sorted(set(cloud.source_frame.tolist())) == [3, 4, 5]
    assert len(cloud) == 4 + 5 + 6


def test_window_rejects_out_of_order():
    win = AccumulationWindow(2)
    win.push(_reg(np.zeros((1, 3)), index=5))
    with pytest.raises(ValueError):
        win.push(_reg(np.zeros((1, 3)), index=5))


def test_empty_partition():
    part = partition(PointCloud.empty(), 1.0)
    assert len(part) == 0 and part.cells == {}


def test_point_ids_unique_across_frames():
    a = _reg(np.zeros((3, 3)), index=0).points
    b = _reg(np.zeros((3, 3)), index=1).points
    ids = PointCloud.concat([a, b]).point_id
    assert len(set(ids.tolist())) == 6


# -- invariants -------------------------------------------------------------------------


@pytest.mark.property
@given(clouds, st.floats(1.0, 90.0))
def test_fov_idempotent(xyz, phi_deg):
    phi = math.radians(phi_deg)
    once = fov_filter(_reg(xyz), phi)
    twice = fov_filter(once, phi)
    assert np.array_equal(once.points.xyz, twice.points.xyz)


@pytest.mark.property
@given(clouds)
def test_fov_right_angle_is_strictly_below(xyz):
    out = fov_filter(_reg(xyz), math.pi / 2)
    assert np.array_equal(out.points.xyz, xyz[xyz[:, 2] - 10.0 < 0.0])


@pytest.mark.property
@given(clouds, st.floats(0.05, 5.0))
def test_partition_is_permutation_and_floor(xyz, s):
    part = partition(PointCloud.from_xyz(xyz), s)
    flat = np.concatenate([part.cell_indices(c) for c in range(len(part))]) if len(part) else np.zeros(0, int)
    assert np.array_equal(np.sort(flat), np.arange(len(xyz)))
    # lexsort oracle: cells in (u, v) order, input order inside a cell
    u = np.floor(xyz[:, 0] / s).astype(np.int64)
    v = np.floor(xyz[:, 1] / s).astype(np.int64)
    oracle = np.lexsort((np.arange(len(xyz)), v, u))
    assert np.array_equal(part.order, oracle)
    assert np.array_equal(part.keys[part.cell_id], np.column_stack([u, v]).reshape(-1, 2))


@pytest.mark.property
@given(st.integers(1, 6), st.lists(st.integers(0, 30), min_size=1, max_size=15))
def test_accumulate_size_is_sum_of_window(K, sizes):
    win = AccumulationWindow(K)
    for i, n in enumerate(sizes):
        cloud = win.push(_reg(np.full((n, 3), float(i)), index=i))
        assert len(win) <= K
        kept = sizes[max(0, i - K + 1) : i + 1]
        assert len(cloud) == sum(kept)


@pytest.mark.property
@given(
    arrays(np.float64, (8, 3), elements=st.floats(-5.0, 5.0)),
    st.integers(0, 71),
    st.lists(st.integers(0, 50), min_size=2, max_size=5, unique=True),
)
def test_stationary_registration_frame_independent(pts, k, indices):
    q = np.array([0.1, -0.2, 0.05, 0.97])
    track = PoseTrack([0.0, 10.0], [q / np.linalg.norm(q)] * 2, [[1.0, 2.0, 10.0]] * 2, max_gap=20.0)
    mount = RigidTransform(np.eye(3), (0.0, 0.0, -0.15))
    out = []
    for idx in sorted(indices):
        t0 = 0.1 * idx
        ts = np.linspace(t0, t0 + 0.099, 8)
        frame = RadarScanFrame(idx, t0, t0 + 0.1, ts, np.full(8, k * math.radians(5.0)), pts, np.ones(8))
        out.append(register_frame(frame, track, mount).points.xyz)
    for o in out[1:]:
        assert np.allclose(o, out[0], atol=1e-9, rtol=0)
