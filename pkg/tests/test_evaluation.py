import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image
from sklearn.metrics import f1_score, precision_score, recall_score

from skytomo.errors import FormatError, InputError, OutOfBoundsError
from skytomo.evaluation import (MetricsReport, RadarSeries, column_metrics, confusion, emit_report,
                                map_metrics, precision_recall_f1, rebin_column, relative_error,
                                simulate_radar)
from skytomo.geometry import GridSpec, LwcGrid


def _brute(pred, truth):
    tp = fp = fn = 0
    for p, t in zip(pred, truth):
        tp += p and t
        fp += p and not t
        fn += (not p) and t
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=200))
def test_prf_matches_brute_force(pairs):
    pred = [p for p, _ in pairs]
    truth = [t for _, t in pairs]
    got = precision_recall_f1(pred, truth)
    want = _brute(pred, truth)
    if sum(pred) and sum(truth):
        assert got == pytest.approx(want, rel=1e-12, abs=0)
        assert got[2] == pytest.approx(f1_score(truth, pred), rel=1e-12)
        assert got[0] == pytest.approx(precision_score(truth, pred), rel=1e-12)
        assert got[1] == pytest.approx(recall_score(truth, pred), rel=1e-12)


def test_prf_worked_example():
    assert precision_recall_f1([True, False], [True, True]) == pytest.approx((1.0, 0.5, 2 / 3))
    assert precision_recall_f1([False, False], [False, False]) == (1.0, 1.0, 1.0)
    assert confusion([1, 1, 0, 0], [1, 0, 1, 0]) == (1, 1, 1, 1)


def test_relative_error_footnote():
    assert relative_error(0.029, 0.321) == pytest.approx(0.0903, abs=5e-5)
    assert round(100 * relative_error(0.029, 0.321), 1) == 9.0
    assert relative_error(0.01, 0.0) is None


def test_rebin_hand_box_average():
    col = np.zeros(160)
    col[40:44] = 0.001                     # 1000 .. 1100 m
    b = rebin_column(col, 0.0, 25.0, 30.0, 4000.0)
    assert len(b) == 134
    np.testing.assert_allclose(b[33:37], [0.001 * 20 / 30, 0.001, 0.001, 0.001 * 20 / 30], rtol=1e-12)
    assert not b[:33].any() and not b[37:].any()


@given(st.integers(0, 10_000))
def test_rebin_conserves_lwp(seed):
    col = np.random.default_rng(seed).random(160) * 1e-3
    b = rebin_column(col, 0.0, 25.0, 30.0, 4000.0)
    assert abs(30.0 * b.sum() - 25.0 * col.sum()) <= 1e-6 * 25.0 * col.sum()


def test_simulate_radar_zero_and_ticks():
    spec = GridSpec(dims=(4, 4, 16))
    times = np.arange(13) * 5.0
    grids = [LwcGrid(spec, np.full(spec.dims, float(k))) for k in range(13)]
    s = simulate_radar(times, grids, (50.0, 50.0), top=400.0)
    np.testing.assert_array_equal(s.times, [0.0, 30.0, 60.0])
    np.testing.assert_allclose(s.profiles[:, 0], [0.0, 6.0, 12.0])   # exact frames at every tick
    zero = simulate_radar(times, [LwcGrid.zeros(spec)] * 13, (10.0, 90.0), top=400.0)
    assert not zero.profiles.any()
    with pytest.raises(OutOfBoundsError):
        simulate_radar(times, grids, (500.0, 50.0))


def _series(seed, n=40, bins=60):
    rng = np.random.default_rng(seed)
    prof = np.zeros((n, bins))
    for t in range(n):
        if rng.random() < 0.7:
            a = int(rng.integers(5, 40))
            prof[t, a:a + int(rng.integers(2, 15))] = rng.uniform(1e-4, 1e-3)
    return prof


def test_column_metrics_identity():
    t = _series(0)
    r = column_metrics(t, t)
    assert r.occ_f1 == 1.0 and r.mae_lwc == 0 and r.mae_lwp == 0 and r.mae_cbh == 0 and r.mae_cth == 0
    assert r.relative_error_lwc == 0.0


@given(st.floats(1e-6, 1e-3))
def test_mae_lwc_detects_translation(c):
    t = _series(1)
    p = t.copy()
    p[t > 0] += c
    r = column_metrics(p, t)
    assert r.mae_lwc == pytest.approx(c * 1e3, rel=1e-9)


def test_column_metrics_heights_from_bins():
    t = np.zeros((2, 10))
    p = np.zeros((2, 10))
    t[0, 3:6] = 1e-3
    p[0, 4:8] = 1e-3
    t[1, 2] = 1e-3
    r = column_metrics(p, t, bin_size=30.0)
    assert r.mae_cbh == pytest.approx(30.0) and r.mae_cth == pytest.approx(60.0)
    assert (r.precision, r.recall) == (1.0, 0.5)
    assert column_metrics(np.zeros((3, 4)), np.zeros((3, 4))).relative_error_lwc is None


def test_map_metrics_identity():
    spec = GridSpec(dims=(5, 5, 10))
    rho = np.zeros(spec.dims)
    rho[1:3, 2, 4:7] = 1e-3
    g = LwcGrid(spec, rho)
    r = map_metrics(g, g)
    assert r.occ_f1 == 1.0 and r.mae_cbh == 0 and r.extra["l3d"] == 0.0
    assert r.extra["mean_cloudy_lwp"] == pytest.approx(0.075)


def test_report_files_and_round_trip(tmp_path):
    t = RadarSeries((1.0, 2.0), np.arange(40) * 30.0, _series(2))
    p = RadarSeries((1.0, 2.0), np.arange(40) * 30.0, _series(3))
    r = column_metrics(p, t)
    paths = emit_report(r, tmp_path / "rep", figures=True, truth=t, pred=p, dpi=50, figsize=(6.0, 3.0))
    text = open(paths["json"]).read()
    assert json.dumps(json.loads(text), indent=2, sort_keys=True) + "\n" == text
    assert MetricsReport.from_dict(json.loads(text)) == r
    assert json.loads(text)["schema_version"] == 1
    rows = open(paths["csv"]).read().splitlines()
    assert rows[0] == "metric,value" and rows[1].startswith("occ_f1,")
    for key in ("time_height", "lwp"):
        with Image.open(paths[key]) as im:
            assert im.size == (300, 150)


def test_report_needs_series_for_figures(tmp_path):
    r = column_metrics(_series(4), _series(4))
    with pytest.raises(InputError):
        emit_report(r, tmp_path, figures=True)


def test_report_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(FormatError):
        emit_report(column_metrics(_series(5), _series(5)), blocker / "out")
