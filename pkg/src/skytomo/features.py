"""Image encoder, plane-sweep lifting onto the height ladder, and height conditioning.

Feature images are ``(d_f, H, W)`` tensors; a :class:`FeatureVolume` stacks the
view-averaged plane features as ``(H_planes, d_f, N_x, N_y)``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .geometry import GridSpec, HeightSweep, Rig, project_points

log = logging.getLogger(__name__)


class ImageEncoder(nn.Module):
    """Three stride-1 5x5 convolutions (13 px receptive field) to ``d_f`` channels."""

    def __init__(self, d_f=16, hidden=32, in_channels=3, kernel=5):
        super().__init__()
        pad = kernel // 2
        self.in_channels = in_channels
        self.d_f = d_f
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, kernel, padding=pad, padding_mode="replicate"),
            nn.GELU(),
            nn.Conv2d(hidden, hidden, kernel, padding=pad, padding_mode="replicate"),
            nn.GELU(),
            nn.Conv2d(hidden, d_f, kernel, padding=pad, padding_mode="replicate"),
        )

    def forward(self, x):
        return self.net(x)


def images_to_tensor(images, dtype=torch.float32):
    """Stack ``(H, W, 3)`` display images into a ``(V, 3, H, W)`` tensor."""
    arr = np.stack([np.asarray(im) for im in images])
    return torch.as_tensor(arr, dtype=dtype).permute(0, 3, 1, 2).contiguous()


def encode_image(encoder: ImageEncoder, image):
    """Per-pixel features of one display image: ``(H, W, 3)`` -> ``(d_f, H, W)``."""
    x = image if torch.is_tensor(image) else images_to_tensor([image])[0]
    if x.ndim != 3 or x.shape[0] != encoder.in_channels:
        raise ConfigError(f"encoder expects {encoder.in_channels} channels, got shape "
                          f"{tuple(x.shape)}", field="model.encoder")
    x = x.to(next(encoder.parameters()).dtype)
    return encoder(x[None])[0]


@dataclass
class FeatureVolume:
    values: torch.Tensor   # (H, d_f, Nx, Ny)
    hits: torch.Tensor     # (H, Nx, Ny) view count per cell

    @property
    def H(self):
        return self.values.shape[0]


@dataclass
class LiftPlan:
    """Precomputed sampling locations of every (plane, column) cell in every view."""

    grids: list        # per view: (H, Ncol, 2) normalized sample coords
    masks: list        # per view: (H, Ncol) bool
    heights: np.ndarray
    spec: GridSpec

    @classmethod
    def build(cls, rig: Rig, sweep: HeightSweep, spec: GridSpec):
        cols = spec.column_centers().reshape(-1, 2)
        grids, masks = [], []
        for cam in rig:
            g = np.empty((sweep.H, len(cols), 2))
            m = np.empty((sweep.H, len(cols)), dtype=bool)
            for k, h in enumerate(sweep.heights):
                pts = np.column_stack([cols, np.full(len(cols), h)])
                g[k], m[k] = _normalized_samples(cam, pts)
            grids.append(torch.as_tensor(g, dtype=torch.float32))
            masks.append(torch.as_tensor(m))
        return cls(grids, masks, np.asarray(sweep.heights), spec)

    @property
    def n_views(self):
        return len(self.grids)


def _normalized_samples(camera, points):
    """grid_sample coordinates (align_corners=True) and in-frustum mask for world points."""
    uv, depth = project_points(camera, points)
    W, H = camera.width, camera.height
    ok = (depth > 1e-9) & np.all(np.isfinite(uv), axis=-1)
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= W - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= H - 1)
    g = np.stack([2 * uv[:, 0] / max(W - 1, 1) - 1, 2 * uv[:, 1] / max(H - 1, 1) - 1], axis=-1)
    g[~ok] = 0.0
    return g, ok


def sample_views(features, grids, masks):
    """Masked view-average of bilinear feature samples.

    ``features[v]`` is ``(C, H, W)``; ``grids[v]`` is ``(..., 2)`` normalized
    coordinates and ``masks[v]`` the matching boolean mask. Returns
    ``(mean (C, ...), count (...))``.
    """
    total, count = None, None
    for feat, g, m in zip(features, grids, masks):
        shape = g.shape[:-1]
        s = F.grid_sample(feat[None], g.reshape(1, 1, -1, 2).to(feat.dtype), mode="bilinear",
                          padding_mode="zeros", align_corners=True)[0, :, 0]
        m = m.reshape(-1)
        s = s * m.to(feat.dtype)
        total = s if total is None else total + s
        count = m.to(feat.dtype) if count is None else count + m.to(feat.dtype)
        out_shape = shape
    mean = total / count.clamp(min=1.0)
    return mean.reshape((mean.shape[0],) + tuple(out_shape)), count.reshape(out_shape)


def lift_features(features, plan: LiftPlan, views=None) -> FeatureVolume:
    """Average each view's features at the projections of every (plane, column) cell."""
    views = list(range(plan.n_views)) if views is None else list(views)
    if len(features) != len(views):
        raise ConfigError(f"got {len(features)} feature images for {len(views)} views")
    nx, ny = plan.spec.dims[:2]
    mean, count = sample_views(features, [plan.grids[v] for v in views],
                               [plan.masks[v] for v in views])
    # mean: (C, H, Ncol) -> (H, C, Nx, Ny)
    values = mean.permute(1, 0, 2).reshape(len(plan.heights), -1, nx, ny)
    hits = count.reshape(len(plan.heights), nx, ny)
    if not bool((hits > 0).any()):
        warnings.warn("no camera sees any plane cell; feature volume is empty", RuntimeWarning)
    return FeatureVolume(values, hits)


def height_embedding(heights, dim=32):
    """Sinusoidal embedding of plane altitudes (m), periods from ~16 km down to ~60 m."""
    h = torch.as_tensor(heights, dtype=torch.float64) / 1000.0
    freqs = math.pi * 2.0 ** torch.linspace(-3.0, 5.0, dim // 2, dtype=torch.float64)
    arg = h[:, None] * freqs[None, :]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


class HeightConditioning(nn.Module):
    """Per-plane channel LayerNorm modulated by ``gamma(h)``, ``delta(h)`` (adaLN)."""

    def __init__(self, d_f=16, embed_dim=32, hidden=64):
        super().__init__()
        self.d_f = d_f
        self.embed_dim = embed_dim
        self.mlp = nn.Sequential(nn.Linear(embed_dim, hidden), nn.GELU(),
                                 nn.Linear(hidden, 2 * d_f))
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def modulation(self, heights):
        dtype = self.mlp[0].weight.dtype
        out = self.mlp(height_embedding(heights, self.embed_dim).to(dtype))
        return 1.0 + out[:, :self.d_f], out[:, self.d_f:]

    def forward(self, volume: FeatureVolume, heights) -> FeatureVolume:
        x = volume.values.permute(0, 2, 3, 1)           # (H, Nx, Ny, C)
        x = F.layer_norm(x, (self.d_f,), eps=1e-6)
        gamma, delta = self.modulation(heights)
        x = x * gamma[:, None, None, :] + delta[:, None, None, :]
        x = x * (volume.hits > 0)[..., None].to(x.dtype)
        return FeatureVolume(x.permute(0, 3, 1, 2), volume.hits)


def condition_on_height(volume: FeatureVolume, sweep: HeightSweep, conditioning: HeightConditioning):
    if volume.H != sweep.H:
        raise ConfigError(f"volume has {volume.H} planes but sweep has {sweep.H}")
    return conditioning(volume, sweep.heights)


def flatten_volume(volume) -> torch.Tensor:
    """``(H, d_f, Nx, Ny)`` -> ``(H * d_f, Nx, Ny)``, plane-major channel order."""
    v = volume.values if isinstance(volume, FeatureVolume) else volume
    return v.reshape(-1, v.shape[-2], v.shape[-1])


def unflatten_volume(flat, H) -> torch.Tensor:
    return flat.reshape(H, -1, flat.shape[-2], flat.shape[-1])
