"""Height-resolved horizontal wind from tracked horizontal slices of a reconstructed sequence."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InputError
from .rng import rng_for

log = logging.getLogger(__name__)

BUCKET_SECONDS = 300.0


@dataclass
class SliceSequence:
    """Grayscale slice stack ``frames[t, x, y]`` in [0, 1] centred on level ``h``."""

    frames: np.ndarray
    h: int
    spacing: float = 15.0
    empty: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or len(self.frames) < 2:
            raise InputError("a slice sequence needs at least 2 frames of shape (Nx, Ny)")
        if self.frames.min() < 0 or self.frames.max() > 1:
            raise InputError("slice values must lie in [0, 1]")
        if self.spacing <= 0:
            raise InputError("frame spacing must be positive")

    @property
    def T(self):
        return len(self.frames)


@dataclass(eq=False)
class Track:
    start: tuple
    positions: np.ndarray          # (T, 2); NaN after occlusion
    scores: np.ndarray             # (T,); score of the match that produced each position
    occluded: bool = False
    occluded_from: int | None = None

    @property
    def end(self):
        return tuple(self.positions[-1])

    @property
    def displacement(self):
        return np.asarray(self.positions[-1]) - np.asarray(self.start, dtype=float)


@dataclass
class WindEntry:
    u: float = float("nan")
    v: float = float("nan")
    n_tracks: int = 0

    @property
    def empty(self):
        return self.n_tracks == 0

    @property
    def speed(self):
        return math.hypot(self.u, self.v)

    @property
    def bearing(self):
        """Compass bearing (degrees clockwise from north) the wind blows toward."""
        return math.degrees(math.atan2(self.u, self.v)) % 360.0


@dataclass
class WindProfile:
    buckets: dict = field(default_factory=dict)   # (bucket_start_s, height_m) -> WindEntry
    pixel_size: float = 25.0

    def rows(self):
        for (t, hgt), e in sorted(self.buckets.items()):
            yield t, hgt, e


def slice_sum(grids, h, spacing=15.0, levels=5) -> SliceSequence:
    """Sum ``levels`` levels centred on ``h`` (default ``h-2 .. h+2``) of every frame,
    min-max scaled over the whole sequence."""
    if levels < 1 or levels % 2 == 0:
        raise InputError("the number of summed levels must be odd and positive")
    r = levels // 2
    rhos = [g.rho if hasattr(g, "rho") else np.asarray(g) for g in grids]
    nz = rhos[0].shape[2]
    if h - r < 0 or h + r >= nz:
        raise InputError(f"slice centre {h} needs levels {h - r}..{h + r} inside 0..{nz - 1}")
    frames = np.stack([a[:, :, h - r:h + r + 1].sum(axis=2) for a in rhos])
    lo, hi = frames.min(), frames.max()
    if hi > lo:
        return SliceSequence((frames - lo) / (hi - lo), h, spacing)
    return SliceSequence(np.zeros_like(frames), h, spacing, empty=True)


def seed_points(frame, n=25, seed=0, margin=0):
    """``n`` random pixels ``(x, y)`` among those at or above the median positive intensity.

    ``margin`` excludes pixels closer than that to the frame border.
    """
    frame = np.asarray(frame, dtype=np.float64)
    inner = np.zeros(frame.shape, dtype=bool)
    inner[margin:frame.shape[0] - margin, margin:frame.shape[1] - margin] = True
    pos = frame > 0
    if not pos.any():
        warnings.warn("seed frame has no positive pixels", RuntimeWarning)
        return np.zeros((0, 2), dtype=np.int64)
    cand = np.argwhere(pos & inner & (frame >= np.median(frame[pos])))
    if len(cand) <= n:
        if len(cand) < n:
            warnings.warn(f"only {len(cand)} seed candidates for {n} requested", RuntimeWarning)
        return cand.astype(np.int64)
    pick = rng_for(seed, "wind-seeds").choice(len(cand), n, replace=False)
    return cand[np.sort(pick)].astype(np.int64)


def _parabolic(m, c, p):
    den = m - 2 * c + p
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (m - p) / den, -0.5, 0.5))


def _patch(frame, cx, cy, half):
    nx, ny = frame.shape
    if cx - half < 0 or cy - half < 0 or cx + half >= nx or cy + half >= ny:
        return None
    return frame[cx - half:cx + half + 1, cy - half:cy + half + 1]


def _at_clipped_edge(sc, i, j):
    """True when a neighbour of ``(i, j)`` was outside the image (scored -2)."""
    n0, n1 = sc.shape
    return ((i > 0 and sc[i - 1, j] == -2) or (i < n0 - 1 and sc[i + 1, j] == -2)
            or (j > 0 and sc[i, j - 1] == -2) or (j < n1 - 1 and sc[i, j + 1] == -2))


def track_points(slices: SliceSequence, seeds, patch=21, radius=16, min_score=0.5):
    """Frame-to-frame NCC block matching with parabolic sub-pixel refinement."""
    if patch % 2 == 0:
        raise InputError("patch size must be odd")
    half = patch // 2
    frames = slices.frames
    tracks = []
    for sx, sy in np.asarray(seeds).reshape(-1, 2):
        pos = np.full((slices.T, 2), np.nan)
        scores = np.full(slices.T, np.nan)
        pos[0] = (sx, sy)
        scores[0] = 1.0
        occl = None
        for k in range(slices.T - 1):
            cx, cy = int(round(pos[k, 0])), int(round(pos[k, 1]))
            tmpl = _patch(frames[k], cx, cy, half)
            if tmpl is None:
                occl = k
                break
            sc = kernels.ncc_scores(tmpl, frames[k + 1], cx, cy, radius)
            i, j = np.unravel_index(int(np.argmax(sc)), sc.shape)
            best = sc[i, j]
            if best < min_score or _at_clipped_edge(sc, i, j):
                # a peak pressed against the frame border means the patch has left the frame
                occl = k + 1
                break
            dx, dy = float(i - radius), float(j - radius)
            if best < 1.0 - 1e-9:      # a perfect match is already exact
                if 0 < i < sc.shape[0] - 1 and min(sc[i - 1, j], sc[i + 1, j]) > -2:
                    dx += _parabolic(sc[i - 1, j], best, sc[i + 1, j])
                if 0 < j < sc.shape[1] - 1 and min(sc[i, j - 1], sc[i, j + 1]) > -2:
                    dy += _parabolic(sc[i, j - 1], best, sc[i, j + 1])
            pos[k + 1] = pos[k] + (dx, dy)
            scores[k + 1] = best
        tracks.append(Track((int(sx), int(sy)), pos, scores, occl is not None, occl))
    return tracks


def filter_tracks(tracks, drop_fraction=0.05):
    """Drop occluded tracks, then the ``floor(drop_fraction * n)`` smallest displacements.

    Ties keep earlier-seeded tracks; the surviving order is unchanged.
    """
    live = [t for t in tracks if not t.occluded]
    n_drop = int(math.floor(drop_fraction * len(live)))
    if n_drop == 0:
        return live
    mags = np.array([np.linalg.norm(t.displacement) for t in live])
    # ascending magnitude; among equals, later seeds come first so they are dropped first
    order = sorted(range(len(live)), key=lambda i: (mags[i], -i))
    dropped = set(order[:n_drop])
    return [t for i, t in enumerate(live) if i not in dropped]


def tracks_to_wind(tracks, pixel_size=25.0, dt=300.0):
    """One ``(u, v)`` sample (m/s) per track from its start-to-end pixel displacement."""
    if dt <= 0:
        raise InputError("dt must be positive")
    if not tracks:
        return np.zeros((0, 2))
    d = np.array([t.displacement if isinstance(t, Track) else
                  np.subtract(t[1], t[0]) for t in tracks], dtype=np.float64)
    return pixel_size * d / dt


def bucket_median(samples) -> WindEntry:
    s = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if len(s) == 0:
        return WindEntry()
    med = np.median(s, axis=0)
    return WindEntry(float(med[0]), float(med[1]), len(s))


@dataclass
class WindParams:
    slice_levels: int = 5
    frames: int = 20
    spacing: float = 15.0
    n_seeds: int = 25
    patch: int = 21
    radius: int = 16
    min_score: float = 0.5
    drop_fraction: float = 0.05
    bucket_seconds: float = BUCKET_SECONDS
    pixel_size: float = 25.0


def retrieve_wind(times, grids, levels, params: WindParams = WindParams(), seed=0) -> WindProfile:
    """Track every level over consecutive windows of ``params.frames`` frames.

    ``times`` must be evenly spaced by ``params.spacing``. Samples of all windows
    starting in the same bucket are pooled before taking the median. Each
    window's ``dt`` is its elapsed time, ``(T - 1) * spacing``.
    """
    times = np.asarray(times, dtype=np.float64)
    if len(times) != len(grids):
        raise InputError("times and grids differ in length")
    if len(times) > 1 and not np.allclose(np.diff(times), params.spacing):
        raise InputError(f"frames must be spaced by {params.spacing} s")
    T = params.frames
    if len(grids) < T:
        raise InputError(f"need at least {T} frames, got {len(grids)}")
    spec = getattr(grids[0], "spec", None)
    z0, sz = (spec.origin[2], spec.sz) if spec is not None else (0.0, 1.0)
    samples = {}
    for w0 in range(0, len(grids) - T + 1, T):
        bucket = math.floor(times[w0] / params.bucket_seconds) * params.bucket_seconds
        for h in levels:
            seq = slice_sum(grids[w0:w0 + T], h, params.spacing, params.slice_levels)
            key = (bucket, float(z0 + h * sz))
            samples.setdefault(key, [])
            if seq.empty:
                continue
            sub = int(rng_for(seed, "wind-window", w0, h).integers(2 ** 62))
            seeds = seed_points(seq.frames[0], params.n_seeds, seed=sub, margin=params.patch // 2)
            tr = track_points(seq, seeds, params.patch, params.radius, params.min_score)
            kept = filter_tracks(tr, params.drop_fraction)
            samples[key].extend(tracks_to_wind(kept, params.pixel_size,
                                               (T - 1) * params.spacing).tolist())
    return WindProfile({k: bucket_median(v) for k, v in samples.items()}, params.pixel_size)
