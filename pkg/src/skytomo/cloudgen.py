"""Procedural single-layer cumulus fields and their ground-truth 2.5D labels."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import GenerationError, InputError
from .geometry import GridSpec, LwcGrid
from .maps import CloudMaps2p5D
from .rng import rng_for

log = logging.getLogger(__name__)

MIN_RUN_VOXELS = 2
COVERAGE_TOLERANCE = 0.02


def _ordered(name, pair, lo=None, hi=None):
    a, b = pair
    if a > b:
        raise InputError(f"{name} must be ordered, got {pair}")
    if lo is not None and a < lo or hi is not None and b > hi:
        raise InputError(f"{name}={pair} outside [{lo}, {hi}]")
    return (a, b)


@dataclass(frozen=True)
class SceneParams:
    seed: int = 0
    coverage_target: float = 0.3
    base_height_range: tuple = (500.0, 1500.0)
    thickness_range: tuple = (100.0, 600.0)
    peak_lwc_range: tuple = (1e-4, 1.5e-3)
    cell_count_range: tuple = (4, 12)
    cell_radius_range: tuple = (150.0, 500.0)
    max_attempts: int = 20

    def __post_init__(self):
        if not 0.0 <= self.coverage_target <= 1.0:
            raise InputError(f"coverage_target must be in [0, 1], got {self.coverage_target}")
        _ordered("base_height_range", self.base_height_range, 0.0)
        _ordered("thickness_range", self.thickness_range, 0.0)
        _ordered("peak_lwc_range", self.peak_lwc_range, 0.0)
        _ordered("cell_count_range", self.cell_count_range, 0)
        _ordered("cell_radius_range", self.cell_radius_range, 0.0)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class SceneSequence:
    frames: tuple = field(default_factory=tuple)
    advection: tuple = (0.0, 0.0)

    def __post_init__(self):
        frames = tuple((float(t), g) for t, g in self.frames)
        ts = [t for t, _ in frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InputError("sequence timestamps must be strictly increasing")
        object.__setattr__(self, "frames", frames)

    @property
    def times(self):
        return np.array([t for t, _ in self.frames])

    @property
    def grids(self):
        return [g for _, g in self.frames]

    def __len__(self):
        return len(self.frames)


def _periodic_gauss(coord, center, sigma, period):
    d = np.abs(coord - center) % period
    d = np.minimum(d, period - d)
    g = np.exp(-0.5 * (d / sigma) ** 2)
    g[d > 3 * sigma] = 0.0
    return g


def _draw_cells(rng, params, spec, n_cells):
    ex, ey, _ = spec.extent
    cells = []
    for _ in range(n_cells):
        radius = rng.uniform(*params.cell_radius_range)
        n_bumps = int(rng.integers(3, 7))
        cells.append({
            "center": (spec.origin[0] + rng.uniform(0, ex), spec.origin[1] + rng.uniform(0, ey)),
            "base": rng.uniform(*params.base_height_range),
            "thickness": rng.uniform(*params.thickness_range),
            "peak": rng.uniform(*params.peak_lwc_range),
            "bumps": [(rng.normal(0, radius / 2, size=2), radius * rng.uniform(0.4, 0.8),
                       rng.uniform(0.5, 1.0)) for _ in range(n_bumps)],
        })
    return cells


def _cell_amplitude(cell, spec):
    xs, ys = spec.axis_centers(0), spec.axis_centers(1)
    ex, ey, _ = spec.extent
    amp = np.zeros(spec.dims[:2])
    for offset, sigma, a in cell["bumps"]:
        cx = cell["center"][0] + offset[0]
        cy = cell["center"][1] + offset[1]
        amp += a * np.outer(_periodic_gauss(xs, cx, sigma, ex), _periodic_gauss(ys, cy, sigma, ey))
    peak = amp.max()
    return amp / peak if peak > 0 else amp


def generate_scene(params: SceneParams, spec: GridSpec | None = None) -> LwcGrid:
    """Deterministic cumulus field: one contiguous, top-heavy run per cloudy column."""
    spec = spec or GridSpec()
    rng = rng_for(params.seed, "cloudgen")
    lo, hi = params.cell_count_range
    n_cells = int(rng.integers(lo, hi + 1))
    if n_cells == 0 or params.coverage_target == 0.0:
        return LwcGrid.zeros(spec)

    n_cols = spec.dims[0] * spec.dims[1]
    best = 0.0
    for attempt in range(params.max_attempts):
        cells = _draw_cells(rng, params, spec, n_cells)
        amps = np.stack([_cell_amplitude(c, spec) for c in cells])
        field_max = amps.max(axis=0)
        owner = amps.argmax(axis=0)
        k = int(round(params.coverage_target * n_cols))
        if k == 0:
            return LwcGrid.zeros(spec)
        order = np.sort(field_max.ravel())[::-1]
        tau = order[k] if k < n_cols else 0.0
        tau = max(tau, 1e-6)
        occupied = field_max > tau
        achieved = occupied.mean()
        best = max(best, achieved)
        if abs(achieved - params.coverage_target) <= COVERAGE_TOLERANCE:
            return LwcGrid(spec, _fill_columns(spec, cells, field_max, owner, occupied, tau,
                                                     params.base_height_range))
        log.debug("attempt %d: coverage %.3f vs target %.3f", attempt, achieved,
                  params.coverage_target)
    raise GenerationError(
        f"could not reach coverage {params.coverage_target:.3f} in {params.max_attempts} attempts",
        diagnostics={"best_coverage": float(best), "n_cells": n_cells,
                     "attempts": params.max_attempts})


def _snap_base(base, spec, base_range):
    """Nearest level index to ``base`` whose altitude stays inside ``base_range``."""
    nz, sz, z0 = spec.dims[2], spec.sz, spec.origin[2]
    lo = int(np.ceil((base_range[0] - z0) / sz - 1e-9))
    hi = int(np.floor((base_range[1] - z0) / sz + 1e-9))
    k = int(round((base - z0) / sz))
    if lo <= hi:
        k = min(max(k, lo), hi)
    return min(max(k, 0), nz - MIN_RUN_VOXELS)


def _fill_columns(spec, cells, field_max, owner, occupied, tau, base_range):
    nz, sz = spec.dims[2], spec.sz
    rho = np.zeros(spec.dims)
    levels = np.arange(nz)
    bases = np.array([_snap_base(c["base"], spec, base_range) for c in cells])
    thick = np.array([c["thickness"] for c in cells])
    peak = np.array([c["peak"] for c in cells])

    shape = np.sqrt(np.clip((field_max - tau) / (1.0 - tau), 0.0, 1.0))
    b = bases[owner]
    n = np.maximum(np.round(thick[owner] * shape / sz).astype(int), MIN_RUN_VOXELS)
    n = np.minimum(n, nz - b)
    amp = peak[owner] * (0.3 + 0.7 * shape)

    rel = levels[None, None, :] - b[..., None]
    inside = (rel >= 0) & (rel < n[..., None]) & occupied[..., None]
    profile = (rel + 0.5) / n[..., None]
    rho[inside] = (amp[..., None] * profile)[inside]
    return rho


def derive_maps(grid: LwcGrid) -> CloudMaps2p5D:
    """LWP, base height and thickness of every column of a ground-truth grid."""
    spec = grid.spec
    sz, z0 = spec.sz, spec.origin[2]
    rho = grid.rho
    lwp = sz * rho.sum(axis=2)
    pos = rho > 0
    occupied = pos.any(axis=2)
    nz = spec.dims[2]
    lowest = np.argmax(pos, axis=2)
    highest = nz - 1 - np.argmax(pos[..., ::-1], axis=2)
    cbh = np.where(occupied, z0 + sz * lowest, 0.0)
    cth = np.where(occupied, z0 + sz * (highest + 1), 0.0)
    dh = np.where(occupied, cth - cbh, 0.0)
    lwp = np.where(occupied, lwp, 0.0)
    return CloudMaps2p5D(lwp=lwp, cbh=cbh, dh=dh, occupancy=occupied)


def _shift_axis(a, shift, axis):
    n = int(np.floor(shift))
    f = shift - n
    out = np.roll(a, n, axis=axis)
    if f != 0.0:
        out = (1.0 - f) * out + f * np.roll(a, n + 1, axis=axis)
    return out


def advect(grid: LwcGrid, velocity, dt: float) -> LwcGrid:
    """Translate horizontally by ``velocity * dt`` with periodic wrap and linear resampling."""
    u, v = velocity
    sx, sy, _ = grid.spec.voxel_size
    rho = grid.rho
    rho = _shift_axis(rho, u * dt / sx, axis=0)
    rho = _shift_axis(rho, v * dt / sy, axis=1)
    return LwcGrid(grid.spec, np.maximum(rho, 0.0))


def make_sequence(grid: LwcGrid, velocity, n_frames: int, spacing: float = 5.0,
                  t0: float = 0.0) -> SceneSequence:
    """Frames of ``grid`` advected from its initial state (one resampling per frame)."""
    frames = [(t0 + k * spacing, grid if k == 0 else advect(grid, velocity, k * spacing))
              for k in range(n_frames)]
    return SceneSequence(tuple(frames), tuple(float(c) for c in velocity))


def column_coverage(grid: LwcGrid) -> float:
    return float((grid.rho > 0).any(axis=2).mean())
