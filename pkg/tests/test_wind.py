import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.ndimage import gaussian_filter

from skytomo.cloudgen import SceneParams, generate_scene, make_sequence
from skytomo.errors import InputError
from skytomo.geometry import GridSpec
from skytomo.wind import (SliceSequence, Track, WindEntry, WindParams, bucket_median, filter_tracks,
                          retrieve_wind, seed_points, slice_sum, track_points, tracks_to_wind)


def _texture(shape=(96, 96), seed=0, sigma=2.0):
    f = gaussian_filter(np.random.default_rng(seed).random(shape), sigma, mode="wrap")
    return (f - f.min()) / (f.max() - f.min())


def _track(start, end, occluded=False):
    pos = np.array([start, end], dtype=float)
    return Track(tuple(start), pos, np.ones(2), occluded, 1 if occluded else None)


def test_slice_sum_zero_and_single_level():
    z = [np.zeros((6, 6, 10)) for _ in range(3)]
    seq = slice_sum(z, 4)
    assert seq.empty and not seq.frames.any()
    rng = np.random.default_rng(0)
    grids = [np.zeros((6, 6, 10)) for _ in range(3)]
    for g in grids:
        g[:, :, 4] = rng.random((6, 6))
    seq = slice_sum(grids, 4)
    field = np.stack([g[:, :, 4] for g in grids])
    np.testing.assert_allclose(seq.frames, (field - field.min()) / (field.max() - field.min()))


@given(st.integers(0, 1000))
def test_slice_sum_min_max(seed):
    rng = np.random.default_rng(seed)
    grids = [rng.random((5, 4, 9)) * rng.random() for _ in range(3)]
    seq = slice_sum(grids, 2)
    assert seq.frames.min() == 0.0 and seq.frames.max() == 1.0


def test_slice_sum_bounds():
    with pytest.raises(InputError):
        slice_sum([np.zeros((4, 4, 8))] * 2, 1)
    with pytest.raises(InputError):
        slice_sum([np.zeros((4, 4, 8))] * 2, 6)


def test_seed_points_exact_candidates():
    frame = np.zeros((30, 30))
    idx = np.random.default_rng(1).choice(900, 25, replace=False)
    frame.flat[idx] = 1.0
    pts = seed_points(frame, 25)
    assert sorted(map(tuple, pts)) == sorted(map(tuple, np.argwhere(frame > 0)))


def test_seed_points_empty_frame_warns():
    with pytest.warns(RuntimeWarning):
        pts = seed_points(np.zeros((10, 10)))
    assert len(pts) == 0


def test_seed_points_too_few_candidates_warns():
    frame = np.zeros((10, 10))
    frame[2, 3] = frame[5, 5] = 1.0
    with pytest.warns(RuntimeWarning):
        pts = seed_points(frame, 25)
    assert len(pts) == 2


@given(st.integers(0, 10_000))
def test_seed_points_above_median(seed):
    frame = _texture((40, 40), seed) * (np.random.default_rng(seed).random((40, 40)) > 0.3)
    pts = seed_points(frame, 25, seed=seed)
    assert len(pts) == 25
    chosen = frame[pts[:, 0], pts[:, 1]]
    assert chosen.min() >= np.percentile(frame[frame > 0], 50)
    assert np.array_equal(pts, seed_points(frame, 25, seed=seed))


def test_track_static_sequence():
    frame = _texture()
    seq = SliceSequence(np.stack([frame] * 5), h=2)
    tracks = track_points(seq, [(40, 40), (50, 30)])
    for t in tracks:
        assert not t.occluded
        np.testing.assert_allclose(t.displacement, 0.0, atol=1e-12)


def test_track_rigid_shift():
    frame = _texture(seed=3)
    T = 8
    seq = SliceSequence(np.stack([np.roll(frame, 2 * k, axis=0) for k in range(T)]), h=2)
    tracks = track_points(seq, [(30, 40), (25, 60), (20, 20)])
    for t in tracks:
        assert not t.occluded
        np.testing.assert_allclose(t.displacement, (2 * (T - 1), 0), atol=0.25)


def test_track_leaving_frame_is_occluded():
    frame = _texture(seed=4)
    T = 8
    seq = SliceSequence(np.stack([np.roll(frame, 4 * k, axis=0) for k in range(T)]), h=2)
    # 21 px patch around x=75 leaves a 96 px frame after the centre passes x=85
    t = track_points(seq, [(75, 48)])[0]
    assert t.occluded
    k = t.occluded_from
    assert 1 <= k < T
    assert np.all(np.isnan(t.positions[k + 1:]))
    assert t.positions[k][0] + 10 >= 96 or np.isnan(t.positions[k][0])


def test_filter_ties_drop_latest():
    tracks = [_track((i, 0), (i + 3, 4)) for i in range(20)]
    kept = filter_tracks(tracks)
    assert len(kept) == 19
    assert kept == tracks[:19]


def test_filter_removes_static_drifter():
    tracks = [_track((i, 0), (i + 10, 0)) for i in range(19)]
    tracks.insert(7, _track((5, 5), (5.2, 5)))
    kept = filter_tracks(tracks)
    assert len(kept) == 19 and tracks[7] not in kept


def test_filter_all_occluded():
    assert filter_tracks([_track((0, 0), (1, 1), occluded=True)] * 4) == []


@given(st.lists(st.floats(0, 50), min_size=1, max_size=60))
def test_filter_preserves_rank_order(mags):
    tracks = [_track((0, 0), (m, 0)) for m in mags]
    kept = filter_tracks(tracks)
    ks = [t.displacement[0] for t in kept]
    assert len(kept) == len(tracks) - math.floor(0.05 * len(tracks))
    # surviving tracks keep their original relative order and the smallest are the ones dropped
    idx = [tracks.index(t) for t in kept]
    assert idx == sorted(idx)
    dropped = [t.displacement[0] for t in tracks if all(t is not k for k in kept)]
    assert not dropped or max(dropped) <= min(ks)


def test_tracks_to_wind_worked_example():
    uv = tracks_to_wind([((20, 50), (80, 50))], pixel_size=25.0, dt=300.0)
    assert uv.tolist() == [[5.0, 0.0]]
    assert tracks_to_wind([((3, 3), (3, 3))]).tolist() == [[0.0, 0.0]]
    with pytest.raises(InputError):
        tracks_to_wind([((0, 0), (1, 1))], dt=0)


@given(st.floats(-40, 40), st.floats(-40, 40), st.floats(1, 1000), st.floats(0.1, 10))
def test_tracks_to_wind_linearity(dx, dy, dt, c):
    base = tracks_to_wind([((0, 0), (dx, dy))], dt=dt)[0]
    scaled = tracks_to_wind([((0, 0), (c * dx, c * dy))], dt=dt)[0]
    slower = tracks_to_wind([((0, 0), (dx, dy))], dt=c * dt)[0]
    np.testing.assert_allclose(scaled, c * base, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(slower, base / c, rtol=1e-12, atol=1e-12)


def test_bucket_median_and_bearing():
    e = bucket_median([[1.0, 2.0], [3.0, -1.0], [2.0, 10.0]])
    assert (e.u, e.v, e.n_tracks) == (2.0, 2.0, 3)
    empty = bucket_median([])
    assert empty.empty and math.isnan(empty.u)
    assert WindEntry(5.0, 0.0, 1).bearing == pytest.approx(90.0)
    assert WindEntry(0.0, -8.0, 1).bearing == pytest.approx(180.0)
    assert WindEntry(-1.0, 0.0, 1).bearing == pytest.approx(270.0)


def test_retrieve_wind_on_advected_scene():
    spec = GridSpec(dims=(160, 160, 12))
    grid = generate_scene(SceneParams(seed=2, coverage_target=0.35, base_height_range=(50, 75),
                                      thickness_range=(150, 250), cell_count_range=(10, 16)), spec)
    seq = make_sequence(grid, (5.0, 0.0), 20, spacing=15.0)
    prof = retrieve_wind(seq.times, seq.grids, [5], WindParams())
    (key, e), = prof.buckets.items()
    assert key == (0.0, 125.0)
    assert abs(e.speed - 5.0) <= 0.5
    assert abs((e.bearing - 90.0 + 180) % 360 - 180) <= 10.0


def test_retrieve_wind_checks_spacing():
    grids = [np.zeros((4, 4, 8))] * 20
    with pytest.raises(InputError):
        retrieve_wind(np.arange(20) * 10.0, grids, [3])
