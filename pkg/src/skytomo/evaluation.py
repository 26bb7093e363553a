"""Virtual radar columns, column and map metrics, and report emission."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FormatError, InputError, OutOfBoundsError
from .geometry import LwcGrid, world_to_voxel

METRICS_SCHEMA_VERSION = 1
CSV_COLUMNS = ("metric", "value")


@dataclass
class RadarSeries:
    """LWC profiles ``profiles[t, bin]`` (kg m^-3) at ``bin_size`` spacing from altitude 0."""

    location: tuple
    times: np.ndarray
    profiles: np.ndarray
    bin_size: float = 30.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.profiles = np.asarray(self.profiles, dtype=np.float64)
        if self.profiles.shape[0] != len(self.times):
            raise InputError("one profile per time step is required")
        if np.any(self.profiles < 0):
            raise InputError("radar profiles must be non-negative")

    @property
    def bin_edges(self):
        return np.arange(self.profiles.shape[1] + 1) * self.bin_size


def rebin_column(column, z0, sz, bin_size=30.0, top=4000.0):
    """Box-average a column of ``sz``-thick levels starting at ``z0`` onto ``[j*bin, (j+1)*bin)``."""
    column = np.asarray(column, dtype=np.float64)
    nb = int(math.ceil(top / bin_size - 1e-9))
    edges = np.arange(nb + 1) * bin_size
    lo = z0 + np.arange(len(column)) * sz
    hi = lo + sz
    overlap = np.clip(np.minimum(hi[None, :], edges[1:, None]) - np.maximum(lo[None, :], edges[:-1, None]),
                      0.0, None)
    return overlap @ column / bin_size


def simulate_radar(times, grids, location, bin_size=30.0, top=4000.0, tick=30.0) -> RadarSeries:
    """Nearest-column truth profiles on ``bin_size`` bins at the frame nearest each ``tick``."""
    times = np.asarray(times, dtype=np.float64)
    if len(times) == 0 or len(times) != len(grids):
        raise InputError("need one grid per time")
    spec = grids[0].spec
    try:
        ix, iy, _ = world_to_voxel(spec, (location[0], location[1], spec.origin[2]))
    except OutOfBoundsError as exc:
        raise OutOfBoundsError(f"radar location {tuple(location)} is outside the grid footprint") from exc
    ticks = np.arange(times[0], times[-1] + 1e-9, tick)
    nearest = np.abs(times[None, :] - ticks[:, None]).argmin(axis=1)
    prof = np.stack([rebin_column(grids[k].rho[ix, iy], spec.origin[2], spec.sz, bin_size, top)
                     for k in nearest])
    return RadarSeries(tuple(location), ticks, prof, bin_size)


def confusion(pred, truth):
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    return (int(np.sum(pred & truth)), int(np.sum(pred & ~truth)), int(np.sum(~pred & truth)),
            int(np.sum(~pred & ~truth)))


def precision_recall_f1(pred, truth):
    """Precision, recall and F1 of boolean occupancy; each is 1.0 when its denominator is 0."""
    tp, fp, fn, _ = confusion(pred, truth)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 1.0
    return precision, recall, f1


def relative_error(mae, mean_truth):
    return None if not mean_truth or not np.isfinite(mean_truth) else mae / mean_truth


@dataclass
class MetricsReport:
    occ_f1: float
    precision: float
    recall: float
    mae_lwc: float | None          # g m^-3
    mae_lwp: float                 # kg m^-2
    mae_cbh: float | None          # m
    mae_cth: float | None          # m
    relative_error_lwc: float | None
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["schema_version"] = METRICS_SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("schema_version", None)
        return cls(**d)


def _base_top(profiles, bin_size):
    occ = profiles > 0
    any_ = occ.any(axis=1)
    first = np.argmax(occ, axis=1)
    last = profiles.shape[1] - 1 - np.argmax(occ[:, ::-1], axis=1)
    return any_, first * bin_size, (last + 1) * bin_size


def _mean_or_none(a):
    return float(np.mean(a)) if len(a) else None


def column_metrics(pred, truth, bin_size=None) -> MetricsReport:
    """Compare matched profiles ``[time, bin]``; averages run over matched samples."""
    if isinstance(pred, RadarSeries):
        bin_size = bin_size or pred.bin_size
        pred = pred.profiles
    if isinstance(truth, RadarSeries):
        bin_size = bin_size or truth.bin_size
        truth = truth.profiles
    bin_size = bin_size or 30.0
    p, t = np.asarray(pred, np.float64), np.asarray(truth, np.float64)
    if p.shape != t.shape:
        raise InputError(f"prediction shape {p.shape} != truth shape {t.shape}")
    p_occ, p_cbh, p_cth = _base_top(p, bin_size)
    t_occ, t_cbh, t_cth = _base_top(t, bin_size)
    precision, recall, f1 = precision_recall_f1(p_occ, t_occ)
    cloudy = t > 0
    err = np.abs(p - t)[cloudy] * 1e3
    mean_cloudy = float(t[cloudy].mean() * 1e3) if cloudy.any() else None
    mae_lwc = _mean_or_none(err)
    both = p_occ & t_occ
    tp, fp, fn, tn = confusion(p_occ, t_occ)
    return MetricsReport(
        occ_f1=f1, precision=precision, recall=recall,
        mae_lwc=mae_lwc,
        mae_lwp=float(np.mean(np.abs(p.sum(axis=1) - t.sum(axis=1)) * bin_size)),
        mae_cbh=_mean_or_none(np.abs(p_cbh - t_cbh)[both]),
        mae_cth=_mean_or_none(np.abs(p_cth - t_cth)[both]),
        relative_error_lwc=None if mae_lwc is None else relative_error(mae_lwc, mean_cloudy),
        counts={"times": int(len(p)), "cloudy_bins": int(cloudy.sum()), "both_occupied": int(both.sum()),
                "tp": tp, "fp": fp, "fn": fn, "tn": tn},
    )


def map_metrics(pred: LwcGrid, truth: LwcGrid) -> MetricsReport:
    """Whole-grid comparison: every column is a sample; heights from native levels."""
    if pred.spec != truth.spec:
        raise InputError("grids must share a GridSpec")
    from .cloudgen import derive_maps
    pm, tm = derive_maps(pred), derive_maps(truth)
    precision, recall, f1 = precision_recall_f1(pm.occupancy, tm.occupancy)
    cloudy = truth.rho > 0
    err = np.abs(pred.rho - truth.rho)[cloudy] * 1e3
    mae_lwc = _mean_or_none(err)
    mean_cloudy = float(truth.rho[cloudy].mean() * 1e3) if cloudy.any() else None
    both = pm.occupancy & tm.occupancy
    lwp_err = np.abs(pm.lwp - tm.lwp)
    tp, fp, fn, tn = confusion(pm.occupancy, tm.occupancy)
    mean_lwp = float(tm.lwp[tm.occupancy].mean()) if tm.occupancy.any() else None
    return MetricsReport(
        occ_f1=f1, precision=precision, recall=recall, mae_lwc=mae_lwc,
        mae_lwp=float(lwp_err.mean()),
        mae_cbh=_mean_or_none(np.abs(pm.cbh - tm.cbh)[both]),
        mae_cth=_mean_or_none(np.abs(pm.cth - tm.cth)[both]),
        relative_error_lwc=None if mae_lwc is None else relative_error(mae_lwc, mean_cloudy),
        counts={"columns": int(both.size), "cloudy_voxels": int(cloudy.sum()),
                "both_occupied": int(both.sum()), "tp": tp, "fp": fp, "fn": fn, "tn": tn},
        extra={"mae_lwp_cloudy": _mean_or_none(lwp_err[tm.occupancy]),
               "mean_cloudy_lwp": mean_lwp,
               "l3d": float(np.abs(pred.rho - truth.rho).mean())},
    )


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")


def emit_report(report: MetricsReport, out_dir, figures=False, truth: RadarSeries = None,
                pred: RadarSeries = None, dpi=100, figsize=(8.0, 4.0), name="metrics"):
    """Write ``<name>.json`` and ``<name>.csv``; optionally time-height and LWP PNG panels."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = {"json": os.path.join(out_dir, f"{name}.json"),
                 "csv": os.path.join(out_dir, f"{name}.csv")}
        d = report.to_dict()
        write_json(paths["json"], d)
        with open(paths["csv"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for k in ("occ_f1", "precision", "recall", "mae_lwc", "mae_lwp", "mae_cbh", "mae_cth",
                      "relative_error_lwc"):
                w.writerow((k, "" if d[k] is None else repr(d[k])))
            for k, v in sorted(d["counts"].items()):
                w.writerow((f"count_{k}", v))
            for k, v in sorted(d["extra"].items()):
                w.writerow((k, "" if v is None else repr(v)))
        if figures:
            if truth is None or pred is None:
                raise InputError("figures need the truth and predicted radar series")
            paths.update(_figures(out_dir, truth, pred, dpi, figsize, name))
    except OSError as exc:
        raise FormatError(f"cannot write report to {out_dir}: {exc}") from exc
    return paths


def _figures(out_dir, truth, pred, dpi, figsize, name):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = {}
    vmax = max(truth.profiles.max(), pred.profiles.max(), 1e-12) * 1e3
    fig, axes = plt.subplots(2, 1, figsize=figsize, dpi=dpi, sharex=True)
    ext = [truth.times[0], truth.times[-1], 0, truth.bin_edges[-1]]
    for ax, s, title in zip(axes, (truth, pred), ("truth", "prediction")):
        im = ax.imshow(s.profiles.T * 1e3, origin="lower", aspect="auto", extent=ext,
                       vmin=0, vmax=vmax, cmap="Blues_r")
        ax.set_ylabel("height (m)")
        ax.set_title(f"LWC {title} (g m$^{{-3}}$)")
    axes[-1].set_xlabel("time (s)")
    fig.colorbar(im, ax=axes)
    out["time_height"] = os.path.join(out_dir, f"{name}_time_height.png")
    fig.savefig(out["time_height"], dpi=dpi)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=figsize, dpi=dpi)
    ax.plot(truth.times, truth.profiles.sum(axis=1) * truth.bin_size, label="truth")
    ax.plot(pred.times, pred.profiles.sum(axis=1) * pred.bin_size, label="prediction")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("LWP (kg m$^{-2}$)")
    ax.legend()
    out["lwp"] = os.path.join(out_dir, f"{name}_lwp.png")
    fig.savefig(out["lwp"], dpi=dpi)
    plt.close(fig)
    return out
