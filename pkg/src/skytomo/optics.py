"""LWC -> extinction conversion, single-scattering sky renderer, photometric augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from . import kernels
from .errors import InputError
from .geometry import CameraModel, GridSpec, LwcGrid
from .rng import rng_for

DEFAULT_STEP = 12.5
ISOTROPIC_PHASE = 1.0 / (4.0 * np.pi)
LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class OpticalParams:
    droplet_radius: float = 20e-6
    water_density: float = 1000.0
    q_scat: float = 2.0

    def __post_init__(self):
        if min(self.droplet_radius, self.water_density, self.q_scat) <= 0:
            raise InputError("optical parameters must be positive")

    @property
    def cross_section(self):
        return self.q_scat * np.pi * self.droplet_radius ** 2

    def droplet_concentration(self, lwc):
        return 3.0 * np.asarray(lwc) / (4.0 * np.pi * self.water_density * self.droplet_radius ** 3)


@dataclass(frozen=True)
class SunModel:
    direction: tuple = (0.0, 0.0, 1.0)
    sky_radiance: float = 1.0
    sun_radiance: float = 20.0
    sky_color: tuple = (0.35, 0.55, 1.0)
    sun_color: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        norm = np.linalg.norm(d)
        if norm == 0:
            raise InputError("sun direction must be non-zero")
        d = d / norm
        if d[2] <= 0:
            raise InputError("sun must be above the horizon")
        object.__setattr__(self, "direction", tuple(d))

    @classmethod
    def from_angles(cls, elevation_deg, azimuth_deg, **kw):
        """Azimuth is a compass bearing (clockwise from north)."""
        el, az = np.radians(elevation_deg), np.radians(azimuth_deg)
        d = (np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el))
        return cls(direction=d, **kw)


@dataclass(frozen=True)
class HdrImage:
    """Linear radiance, ``data[row, col, channel]``."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 3 or a.shape[2] != 3:
            raise InputError(f"HDR image must be (H, W, 3), got {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise InputError("HDR image must be finite and non-negative")
        object.__setattr__(self, "data", a)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class ExtinctionGrid:
    spec: GridSpec
    beta: np.ndarray


@dataclass
class RenderResult:
    image: HdrImage
    transmittance: np.ndarray
    scatter: np.ndarray
    warnings: list = field(default_factory=list)


def lwc_to_extinction(grid: LwcGrid, params: OpticalParams = OpticalParams()) -> ExtinctionGrid:
    """Scattering coefficient (m^-1) of each voxel, grid values read as kg m^-3."""
    beta = params.droplet_concentration(grid.rho) * params.cross_section
    return ExtinctionGrid(grid.spec, np.asarray(beta, dtype=np.float64))


def segment_scatter_probability(beta, dz):
    beta, dz = np.asarray(beta, dtype=float), np.asarray(dz, dtype=float)
    if np.any(beta < 0) or np.any(dz < 0):
        raise InputError("beta and path length must be non-negative")
    return -np.expm1(-beta * dz)


def _active_slab(spec: GridSpec, beta):
    """Altitude band outside of which the interpolated extinction is exactly zero."""
    levels = np.nonzero(beta.reshape(-1, spec.dims[2]).max(axis=0) > 0)[0]
    if len(levels) == 0:
        return None
    oz, sz = spec.origin[2], spec.sz
    top = oz + spec.dims[2] * sz
    return (max(oz, oz + (levels[0] - 0.5) * sz), min(top, oz + (levels[-1] + 1.5) * sz),
            int(levels[0]), int(levels[-1]))


def _ray_interval(origins, dirs, z_lo, z_hi, max_distance, box=None):
    """Per-ray ``[t0, t1]`` inside the altitude band (and the box if given)."""
    n = len(origins)
    lo = np.zeros(n)
    hi = np.full(n, float(max_distance))
    bounds = [(2, z_lo, z_hi)]
    if box is not None:
        bounds += [(0, box[0][0], box[1][0]), (1, box[0][1], box[1][1])]
    for axis, a, b in bounds:
        o, d = origins[:, axis], dirs[:, axis]
        flat = np.abs(d) < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            ta, tb = (a - o) / d, (b - o) / d
        t_near = np.where(flat, np.where((o >= a) & (o <= b), -np.inf, np.inf), np.minimum(ta, tb))
        t_far = np.where(flat, np.where((o >= a) & (o <= b), np.inf, -np.inf), np.maximum(ta, tb))
        lo = np.maximum(lo, t_near)
        hi = np.minimum(hi, t_far)
    empty = ~(hi > lo)
    lo[empty] = 0.0
    hi[empty] = 0.0
    return lo, hi


def sun_optical_depth(ext: ExtinctionGrid, sun: SunModel, step=DEFAULT_STEP, periodic=True,
                      max_distance=50_000.0):
    """Optical depth from every voxel center toward the sun (zero outside the cloud band)."""
    spec, beta = ext.spec, ext.beta
    od = np.zeros(spec.dims)
    slab = _active_slab(spec, beta)
    if slab is None:
        return od
    z_lo, z_hi, k_lo, k_hi = slab
    ks = np.arange(max(k_lo - 1, 0), min(k_hi + 2, spec.dims[2]))
    xs, ys, zs = spec.axis_centers(0), spec.axis_centers(1), spec.axis_centers(2)[ks]
    pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    dirs = np.broadcast_to(np.asarray(sun.direction), pts.shape).copy()
    box = None if periodic else (spec.origin, spec.upper)
    t0, t1 = _ray_interval(pts, dirs, z_lo, z_hi, max_distance, box)
    vals, _ = kernels.march_rays(pts, dirs, t0, t1, beta, beta, spec.origin, spec.voxel_size,
                                 step, periodic, False)
    od[:, :, ks] = vals.reshape(len(xs), len(ys), len(ks))
    return od


def sky_background(sun: SunModel, transmittance):
    return (sun.sky_radiance * np.asarray(sun.sky_color))[None, None, :] * transmittance[..., None]


def render(camera: CameraModel, ext: ExtinctionGrid, sun: SunModel, step=DEFAULT_STEP,
           periodic=True, max_distance=20_000.0, phase=ISOTROPIC_PHASE,
           sun_od=None) -> RenderResult:
    """Single-scattering sky image seen by ``camera`` through the extinction field."""
    spec, beta = ext.spec, np.asarray(ext.beta, dtype=np.float64)
    if not np.all(np.isfinite(beta)):
        raise InputError("extinction grid contains non-finite values")
    if np.any(beta < 0):
        raise InputError("extinction grid contains negative values")
    if step > spec.sz / 2:
        raise InputError(f"march step {step} exceeds half the vertical voxel size")
    warnings = []
    c = camera.center
    if spec.contains(c):
        inside_beta = kernels.sample_trilinear(beta, c[0:1], c[1:2], c[2:3], spec.origin,
                                               spec.voxel_size, periodic)[0]
        if inside_beta > 0:
            warnings.append(f"camera center {tuple(np.round(c, 3))} lies inside cloud "
                            f"(beta={inside_beta:.3g} m^-1)")

    W, H = camera.width, camera.height
    vv, uu = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    dirs = camera.pixel_rays(np.stack([uu, vv], axis=-1)).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(c, dirs.shape).copy()

    slab = _active_slab(spec, beta)
    if slab is None:
        od = np.zeros(len(dirs))
        scat = np.zeros(len(dirs))
    else:
        if sun_od is None:
            sun_od = sun_optical_depth(ext, sun, step=step, periodic=periodic)
        box = None if periodic else (spec.origin, spec.upper)
        t0, t1 = _ray_interval(origins, dirs, slab[0], slab[1], max_distance, box)
        od, scat = kernels.march_rays(origins, dirs, t0, t1, beta, sun_od, spec.origin,
                                      spec.voxel_size, step, periodic, True)
    trans = np.exp(-od).reshape(H, W)
    scat = scat.reshape(H, W)
    sun_term = (sun.sun_radiance * phase * np.asarray(sun.sun_color))[None, None, :]
    img = sky_background(sun, trans) + sun_term * scat[..., None]
    return RenderResult(HdrImage(img), trans, scat, warnings)


def luminance(rgb):
    return np.asarray(rgb) @ LUMA


@dataclass(frozen=True)
class AugmentParams:
    alpha: float = 0.875
    beta: float = 0.8
    saturation: float = 1.0
    hue: float = 0.0


def sample_augment_params(seed) -> AugmentParams:
    rng = rng_for(seed, "augment")
    return AugmentParams(alpha=rng.uniform(0.8, 0.95), beta=rng.uniform(0.7, 0.9),
                         saturation=rng.uniform(0.75, 1.25),
                         hue=rng.uniform(-0.05 / 3.14, 0.05 / 3.14))


def tonemap(rgb, alpha, beta):
    """Scale exposure so the ``alpha`` luminance percentile displays at ``beta``; clip to [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    ref = np.percentile(luminance(rgb), 100.0 * alpha)
    exposure = beta / ref if ref > 0 else 1.0
    return np.clip(rgb * exposure, 0.0, 1.0)


def adjust_saturation(rgb, factor):
    gray = luminance(rgb)[..., None]
    return np.clip(gray + factor * (rgb - gray), 0.0, 1.0)


def adjust_hue(rgb, shift):
    """Rotate hue by ``shift`` turns (fraction of the color wheel)."""
    if shift == 0:
        return rgb
    hsv = rgb_to_hsv(np.clip(rgb, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return hsv_to_rgb(hsv)


def photometric(image, params: AugmentParams = AugmentParams()):
    """Brightness-percentile tonemap, then saturation, then hue; output in [0, 1]."""
    rgb = image.data if isinstance(image, HdrImage) else np.asarray(image)
    out = tonemap(rgb, params.alpha, params.beta)
    out = adjust_saturation(out, params.saturation)
    out = adjust_hue(out, params.hue)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(image, seed):
    return photometric(image, sample_augment_params(seed))


def display(image):
    """Deterministic inference-time tonemap (mid-range augmentation parameters)."""
    return photometric(image, AugmentParams())
