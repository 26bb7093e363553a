"""Cameras, voxel lattices, pinhole projection and plane-induced homographies.

World frame: x east, y north, z altitude above the local ground (meters).
Camera extrinsics are world->camera: ``X_cam = R @ X_world + t``.
Pixel coordinates put integer values at pixel centers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateProjectionError,
    GeometryError,
    InputError,
    NoIntersectionError,
    OutOfBoundsError,
)

DEPTH_EPS = 1e-9
RAY_EPS = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """Regular voxel lattice anchored at ``origin`` (corner of voxel (0, 0, 0))."""

    origin: tuple = (0.0, 0.0, 0.0)
    dims: tuple = (200, 200, 160)
    voxel_size: tuple = (25.0, 25.0, 25.0)

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        if len(self.origin) != 3 or len(self.dims) != 3 or len(self.voxel_size) != 3:
            raise GeometryError("GridSpec fields must be 3-vectors")
        if min(self.dims) < 1:
            raise GeometryError(f"grid dims must be >= 1, got {self.dims}")
        if min(self.voxel_size) <= 0:
            raise GeometryError(f"voxel sizes must be > 0, got {self.voxel_size}")

    @property
    def shape(self):
        return self.dims

    @property
    def extent(self):
        return tuple(n * s for n, s in zip(self.dims, self.voxel_size))

    @property
    def upper(self):
        return tuple(o + e for o, e in zip(self.origin, self.extent))

    @property
    def sz(self):
        return self.voxel_size[2]

    def axis_centers(self, axis):
        n, s, o = self.dims[axis], self.voxel_size[axis], self.origin[axis]
        return o + (np.arange(n) + 0.5) * s

    def column_centers(self):
        """(Nx, Ny, 2) world (x, y) of every column center."""
        xs, ys = self.axis_centers(0), self.axis_centers(1)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def level_heights(self):
        """Altitude ``z * s_z`` of each level index as used by the layer lifting."""
        return self.origin[2] + np.arange(self.dims[2]) * self.sz

    def contains(self, point, strict=False):
        p = np.asarray(point, dtype=float)
        lo, hi = np.array(self.origin), np.array(self.upper)
        if strict:
            return bool(np.all(p > lo) and np.all(p < hi))
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def to_dict(self):
        return {"origin": list(self.origin), "dims": list(self.dims),
                "voxel_size": list(self.voxel_size)}


def world_to_voxel(spec: GridSpec, point) -> tuple:
    """Floor-bin a world point into its voxel index."""
    p = np.asarray(point, dtype=float)
    idx = np.floor((p - np.array(spec.origin)) / np.array(spec.voxel_size)).astype(int)
    if np.any(idx < 0) or np.any(idx >= np.array(spec.dims)):
        raise OutOfBoundsError(f"point {tuple(p)} falls outside the grid (index {tuple(idx)})")
    return tuple(int(i) for i in idx)


def voxel_center(spec: GridSpec, index) -> np.ndarray:
    idx = np.asarray(index, dtype=int)
    if np.any(idx < 0) or np.any(idx >= np.array(spec.dims)):
        raise OutOfBoundsError(f"voxel index {tuple(idx)} outside grid dims {spec.dims}")
    return np.array(spec.origin) + (idx + 0.5) * np.array(spec.voxel_size)


@dataclass(frozen=True)
class LwcGrid:
    """Liquid water content (kg m^-3) on a :class:`GridSpec`, indexed ``rho[x, y, z]``."""

    spec: GridSpec
    rho: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho)
        if rho.shape != self.spec.dims:
            raise InputError(f"rho shape {rho.shape} does not match grid dims {self.spec.dims}")
        if not np.all(np.isfinite(rho)):
            raise InputError("LWC grid contains non-finite values")
        if np.any(rho < 0):
            raise InputError("LWC grid contains negative values")
        object.__setattr__(self, "rho", rho)

    @classmethod
    def zeros(cls, spec, dtype=np.float64):
        return cls(spec, np.zeros(spec.dims, dtype=dtype))


def _as_matrix(a, shape, name):
    m = np.asarray(a, dtype=np.float64)
    if m.size != int(np.prod(shape)):
        raise GeometryError(f"{name} must have {np.prod(shape)} entries")
    return m.reshape(shape)


@dataclass(frozen=True, eq=False)
class CameraModel:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = _as_matrix(self.K, (3, 3), "K")
        R = _as_matrix(self.R, (3, 3), "R")
        t = _as_matrix(self.t, (3,), "t")
        if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("K must be upper-triangular with positive focal lengths")
        if abs(K[2, 2] - 1.0) > 1e-12:
            raise GeometryError("K[2, 2] must be 1")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise GeometryError("R must be a proper rotation (orthonormal, det 1)")
        for name, v in (("K", K), ("R", R), ("t", t)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def image_size(self):
        return (self.width, self.height)

    def pixel_rays(self, pixels):
        """World-frame (unnormalized) ray directions for ``(..., 2)`` pixels."""
        pix = np.asarray(pixels, dtype=float)
        homog = np.concatenate([pix, np.ones(pix.shape[:-1] + (1,))], axis=-1)
        cam = homog @ np.linalg.inv(self.K).T
        return cam @ self.R

    def to_dict(self):
        return {"K": self.K.ravel().tolist(), "R": self.R.ravel().tolist(),
                "t": self.t.tolist(), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(K=d["K"], R=d["R"], t=d["t"], width=d["width"], height=d["height"])


def project_points(camera: CameraModel, points):
    """Vectorized projection. Returns ``(uv, depth)`` for ``(..., 3)`` points."""
    p = np.asarray(points, dtype=float)
    cam = p @ camera.R.T + camera.t
    depth = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = cam @ camera.K.T
        uv = pix[..., :2] / pix[..., 2:3]
    return uv, depth


def project(camera: CameraModel, point) -> np.ndarray:
    """Project one world point to pixel ``(u, v)``; may land outside the image."""
    uv, depth = project_points(camera, np.asarray(point, dtype=float).reshape(1, 3))
    if depth[0] <= DEPTH_EPS:
        raise DegenerateProjectionError(
            f"point {tuple(point)} has depth {depth[0]:.3g} m (on or behind the principal plane)")
    return uv[0]


def pixel_to_plane(camera: CameraModel, pixel, h: float) -> np.ndarray:
    """Intersect the viewing ray of ``pixel`` with the horizontal plane ``z = h``."""
    ray = camera.pixel_rays(np.asarray(pixel, dtype=float).reshape(1, 2))[0]
    c = camera.center
    if abs(ray[2]) < RAY_EPS:
        raise NoIntersectionError(f"ray of pixel {tuple(pixel)} is parallel to plane z={h}")
    if abs(h - c[2]) < RAY_EPS:
        raise NoIntersectionError(f"camera center lies on plane z={h}")
    s = (h - c[2]) / ray[2]
    if s <= 0:
        raise BehindCameraError(f"plane z={h} is behind the camera for pixel {tuple(pixel)}")
    return (c + s * ray)[:2]


def pixels_to_plane(camera: CameraModel, pixels, h: float):
    """Vectorized :func:`pixel_to_plane`; returns ``(xy, valid)`` without raising."""
    rays = camera.pixel_rays(pixels)
    c = camera.center
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (h - c[2]) / rays[..., 2]
    valid = (np.abs(rays[..., 2]) >= RAY_EPS) & (s > 0) & np.isfinite(s)
    xy = c[:2] + s[..., None] * rays[..., :2]
    return xy, valid


def plane_homography(camera: CameraModel, h: float) -> np.ndarray:
    """3x3 map from homogeneous pixels to homogeneous plane coordinates ``(x, y, 1)``.

    Points on ``z = h`` project through ``K [r1 r2 (h r3 + t)]``; this returns its
    inverse, which is the plane-induced homography written in the extrinsic
    convention used here.
    """
    R, t = camera.R, camera.t
    fwd = camera.K @ np.column_stack([R[:, 0], R[:, 1], h * R[:, 2] + t])
    if abs(np.linalg.det(fwd)) < 1e-12 * np.linalg.norm(fwd) ** 3:
        raise NoIntersectionError(f"plane z={h} passes through the camera center")
    return np.linalg.inv(fwd)


def look_at(position, target, width, height, fov_deg, up=(0.0, 0.0, 1.0)) -> CameraModel:
    """Pinhole camera at ``position`` whose optical axis points at ``target``."""
    pos = np.asarray(position, dtype=float)
    fwd = np.asarray(target, dtype=float) - pos
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=float)
    if np.linalg.norm(np.cross(fwd, up)) < 1e-6:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    K = np.array([[f, 0, (width - 1) / 2], [0, f, (height - 1) / 2], [0, 0, 1.0]])
    return CameraModel(K=K, R=R, t=-R @ pos, width=width, height=height)


@dataclass(frozen=True)
class Rig:
    cameras: tuple = field(default_factory=tuple)

    def __post_init__(self):
        cams = tuple(self.cameras)
        if len(cams) < 1:
            raise GeometryError("a rig needs at least one camera")
        object.__setattr__(self, "cameras", cams)

    @property
    def N(self):
        return len(self.cameras)

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, i):
        return self.cameras[i]

    def subset(self, views: Sequence[int]) -> "Rig":
        return Rig(tuple(self.cameras[i] for i in views))

    def check_outside(self, spec: GridSpec):
        """Raise if a camera center sits strictly inside the reconstruction volume."""
        for i, cam in enumerate(self.cameras):
            if spec.contains(cam.center, strict=True):
                raise GeometryError(f"camera {i} center {tuple(cam.center)} lies inside the volume")

    def to_dict(self):
        return {"cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(CameraModel.from_dict(c) for c in d["cameras"]))


def default_rig(spec: GridSpec, n_pairs=3, width=64, height=64, fov_deg=100.0,
                radius_factor=0.62, baseline_factor=0.08, elevation_deg=None) -> Rig:
    """Inward-looking triangle of ground camera pairs around the grid footprint.

    Cameras sit on the ground plane of the grid and are tilted so the lower
    image edge is close to the horizon (``elevation_deg`` defaults to
    ``fov/2 - 5``).
    """
    ox, oy, oz = spec.origin
    ex, ey, ez = spec.extent
    cx, cy = ox + ex / 2, oy + ey / 2
    radius = radius_factor * max(ex, ey)
    baseline = baseline_factor * max(ex, ey)
    el = np.radians(fov_deg / 2 - 5 if elevation_deg is None else elevation_deg)
    th = oz + radius * np.tan(el)
    cams = []
    for k in range(n_pairs):
        ang = np.pi / 2 + 2 * np.pi * k / n_pairs
        base = np.array([cx + radius * np.cos(ang), cy + radius * np.sin(ang), oz])
        tangent = np.array([-np.sin(ang), np.cos(ang), 0.0])
        for side in (-0.5, 0.5):
            pos = base + side * baseline * tangent
            cams.append(look_at(pos, (cx, cy, th), width, height, fov_deg))
    return Rig(tuple(cams))


@dataclass(frozen=True)
class HeightSweep:
    heights: tuple = tuple(400.0 + 200.0 * k for k in range(18))

    def __post_init__(self):
        hs = tuple(float(h) for h in self.heights)
        if len(hs) < 1 or any(b <= a for a, b in zip(hs, hs[1:])):
            raise GeometryError("sweep heights must be non-empty and strictly increasing")
        object.__setattr__(self, "heights", hs)

    @property
    def H(self):
        return len(self.heights)

    @classmethod
    def regular(cls, start, stop, step):
        n = int(round((stop - start) / step)) + 1
        return cls(tuple(start + step * k for k in range(n)))
