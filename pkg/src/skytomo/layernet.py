"""2D cloud-layer network: flattened plane-sweep features -> LWP / CBH / thickness maps."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DivergenceError
from .features import (FeatureVolume, HeightConditioning, ImageEncoder, LiftPlan,
                       flatten_volume, images_to_tensor, lift_features)
from .maps import CloudMaps2p5D
from .optics import augment, display
from .rng import rng_for, torch_seed_for

log = logging.getLogger(__name__)

HEIGHT_SCALE = 1000.0   # CBH/dH heads predict kilometres


@dataclass
class LayerNetConfig:
    n_planes: int = 18
    d_f: int = 16
    encoder_hidden: int = 32
    embed_dim: int = 32
    base_channels: int = 64
    depth: int = 4
    lwp_scale: float = 0.1
    hit_channel: bool = True

    def __post_init__(self):
        for name in ("n_planes", "d_f", "encoder_hidden", "embed_dim", "base_channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive", field=f"model.layer.{name}")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0", field="model.layer.depth")
        if self.lwp_scale <= 0:
            raise ConfigError("lwp_scale must be positive", field="model.layer.lwp_scale")

    @property
    def in_channels(self):
        return self.n_planes * self.d_f + int(self.hit_channel)


@dataclass
class TrainConfig:
    steps: int = 5000
    learning_rate: float = 2e-4
    schedule: str = "cosine"        # or "constant"
    warmup_steps: int = 0
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0
    batch_size: int = 1
    weight_decay: float = 0.0
    lambda_cbh: float = 0.1
    lambda_dh: float = 0.1
    occupancy_weight: float = 1.0
    height_unit: float = 1000.0     # CBH/dH L1 terms measured in km
    view_dropping: bool = True
    photometric: bool = True
    eval_every: int = 0             # 0: evaluate only at start and end
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0", field="train.steps")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive", field="train.learning_rate")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}", field="train.schedule")
        if self.batch_size != 1:
            raise ConfigError("only batch_size 1 is supported", field="train.batch_size")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive", field="train.grad_clip")
        if min(self.lambda_cbh, self.lambda_dh, self.occupancy_weight) < 0:
            raise ConfigError("loss weights must be non-negative", field="train")
        if self.height_unit <= 0:
            raise ConfigError("height_unit must be positive", field="train.height_unit")
        self.betas = tuple(self.betas)

    def lr_at(self, step):
        lr = self.learning_rate
        if self.warmup_steps and step < self.warmup_steps:
            return lr * (step + 1) / self.warmup_steps
        if self.schedule == "cosine" and self.steps > 0:
            return 0.5 * lr * (1.0 + math.cos(math.pi * step / self.steps))
        return lr


def _groups(ch):
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class _Block(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(_groups(cout), cout), nn.GELU(),
            nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(_groups(cout), cout), nn.GELU(),
        )

    def forward(self, x):
        return self.net(x)


class UNet2D(nn.Module):
    """Encoder-decoder with skip connections; input padded to a multiple of 2**depth."""

    def __init__(self, in_channels, base=64, depth=4):
        super().__init__()
        self.depth = depth
        chans = [base * min(2 ** i, 4) for i in range(depth + 1)]
        self.inc = _Block(in_channels, chans[0])
        self.down = nn.ModuleList(_Block(chans[i], chans[i + 1]) for i in range(depth))
        self.up = nn.ModuleList(_Block(chans[i + 1] + chans[i], chans[i])
                                for i in reversed(range(depth)))
        self.out_channels = chans[0]

    def forward(self, x):
        h, w = x.shape[-2:]
        m = 2 ** self.depth
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph))
        skips = [self.inc(x)]
        for blk in self.down:
            skips.append(blk(F.avg_pool2d(skips[-1], 2)))
        y = skips.pop()
        for blk in self.up:
            s = skips.pop()
            y = blk(torch.cat([F.interpolate(y, size=s.shape[-2:], mode="nearest"), s], dim=1))
        return y[..., :h, :w]


class Layer2DModel(nn.Module):
    """Trunk plus 1x1 heads for LWP, CBH, thickness and an occupancy logit."""

    def __init__(self, cfg: LayerNetConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = UNet2D(cfg.in_channels, cfg.base_channels, cfg.depth)
        self.head = nn.Conv2d(self.trunk.out_channels, 4, 1)

    def forward(self, x):
        """``x``: ``(C, Nx, Ny)`` -> dict of ``(Nx, Ny)`` tensors."""
        if x.shape[-3] != self.cfg.in_channels:
            raise ConfigError(f"layer model expects {self.cfg.in_channels} input channels, "
                              f"got {x.shape[-3]}", field="model.layer")
        out = self.head(self.trunk(x[None]))[0]
        return {
            "lwp": self.cfg.lwp_scale * F.softplus(out[0]),
            "cbh": HEIGHT_SCALE * F.softplus(out[1]),
            "dh": HEIGHT_SCALE * F.softplus(out[2]),
            "occ_logit": out[3],
        }


class CloudLayerStack(nn.Module):
    """Encoder, height conditioning and 2D layer model trained jointly in stage 1."""

    def __init__(self, cfg: LayerNetConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(torch_seed_for(seed, "layer-init"))
            self.encoder = ImageEncoder(cfg.d_f, cfg.encoder_hidden)
            self.conditioning = HeightConditioning(cfg.d_f, cfg.embed_dim)
            self.layer = Layer2DModel(cfg)

    def volume_input(self, images, plan: LiftPlan, views=None):
        """Display images ``(V, 3, H, W)`` -> flattened, height-conditioned model input."""
        if isinstance(images, (list, tuple)):
            images = images_to_tensor(images)
        feats = self.encoder(images)
        vol = lift_features(list(feats), plan, views)
        n_views = feats.shape[0]
        return self.flat_input(vol, plan, n_views)

    def flat_input(self, vol: FeatureVolume, plan: LiftPlan, n_views):
        if vol.H != self.cfg.n_planes:
            raise ConfigError(f"sweep has {vol.H} planes, model expects {self.cfg.n_planes}",
                              field="model.layer.n_planes")
        vol = self.conditioning(vol, plan.heights)
        x = flatten_volume(vol)
        if self.cfg.hit_channel:
            frac = vol.hits.mean(dim=0, keepdim=True) / max(n_views, 1)
            x = torch.cat([x, frac.to(x.dtype)], dim=0)
        return x

    def forward(self, images, plan: LiftPlan, views=None):
        return self.layer(self.volume_input(images, plan, views))


def predict_maps(outputs, grid_top=None) -> CloudMaps2p5D:
    """Threshold the occupancy logit and zero unoccupied columns (sentinel convention)."""
    with torch.no_grad():
        occ = (outputs["occ_logit"] >= 0).cpu().numpy()
        lwp = outputs["lwp"].double().cpu().numpy()
        cbh = outputs["cbh"].double().cpu().numpy()
        dh = outputs["dh"].double().cpu().numpy()
    if grid_top is not None:
        cbh = np.clip(cbh, 0.0, grid_top)
        dh = np.minimum(dh, grid_top - cbh)
    occ &= dh > 0
    return CloudMaps2p5D(np.where(occ, lwp, 0.0), np.where(occ, cbh, 0.0),
                         np.where(occ, dh, 0.0), occ)


def maps_to_targets(maps: CloudMaps2p5D, dtype=torch.float32):
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)  # noqa: E731
    return {"lwp": t(maps.lwp), "cbh": t(maps.cbh), "dh": t(maps.dh),
            "occupancy": t(maps.occupancy)}


def maps_to_outputs(maps: CloudMaps2p5D, logit=30.0, dtype=torch.float32):
    """Express fixed maps as model outputs (confident occupancy logits)."""
    t = maps_to_targets(maps, dtype)
    return {"lwp": t["lwp"], "cbh": t["cbh"], "dh": t["dh"],
            "occ_logit": (2 * t["occupancy"] - 1) * logit}


def loss_2d(pred, target, cfg: TrainConfig = None):
    """L1 map losses plus occupancy BCE; CBH/dH averaged over GT-occupied columns only.

    Heights enter the L1 terms in units of ``cfg.height_unit`` metres.

    Returns ``(total, parts)`` with ``parts`` holding detached float components.
    """
    cfg = cfg or TrainConfig()
    if pred["lwp"].shape != target["lwp"].shape:
        raise ConfigError(f"prediction shape {tuple(pred['lwp'].shape)} != target shape "
                          f"{tuple(target['lwp'].shape)}")
    occ = target["occupancy"].to(pred["lwp"].dtype)
    n_occ = occ.sum()
    l_lwp = (pred["lwp"] - target["lwp"]).abs().mean()
    if n_occ > 0:
        u = cfg.height_unit
        l_cbh = ((pred["cbh"] - target["cbh"]).abs() * occ).sum() / (n_occ * u)
        l_dh = ((pred["dh"] - target["dh"]).abs() * occ).sum() / (n_occ * u)
    else:
        l_cbh = l_dh = pred["cbh"].sum() * 0.0
    total = l_lwp + cfg.lambda_cbh * l_cbh + cfg.lambda_dh * l_dh
    l_bce = pred["lwp"].sum() * 0.0
    if cfg.occupancy_weight > 0:
        l_bce = F.binary_cross_entropy_with_logits(pred["occ_logit"], occ)
        total = total + cfg.occupancy_weight * l_bce
    parts = {k: float(v.detach()) for k, v in
             (("lwp", l_lwp), ("cbh", l_cbh), ("dh", l_dh), ("bce", l_bce))}
    return total, parts


@dataclass
class TrainingSample:
    """Rendered HDR views of one scene and its ground-truth maps."""

    hdr_views: list
    maps: CloudMaps2p5D
    display_views: torch.Tensor = None
    targets: dict = None

    def __post_init__(self):
        if self.display_views is None:
            self.display_views = images_to_tensor([display(v) for v in self.hdr_views])
        if self.targets is None:
            self.targets = maps_to_targets(self.maps)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    eval_losses: list = field(default_factory=list)   # (step, loss)
    steps: int = 0

    @property
    def initial_eval(self):
        return self.eval_losses[0][1] if self.eval_losses else float("nan")

    @property
    def final_eval(self):
        return self.eval_losses[-1][1] if self.eval_losses else float("nan")

    def to_dict(self):
        return asdict(self)


def evaluate_stage1(stack: CloudLayerStack, dataset, plan: LiftPlan, cfg: TrainConfig):
    """Mean loss over the dataset with all views and the deterministic display tonemap."""
    total = 0.0
    with torch.no_grad():
        for s in dataset:
            loss, _ = loss_2d(stack(s.display_views, plan), s.targets, cfg)
            total += float(loss)
    return total / max(len(dataset), 1)


def _step_views(rng, n_views, enabled):
    if not enabled or n_views <= 1:
        return list(range(n_views))
    n_drop = int(rng.integers(0, n_views))
    return sorted(rng.choice(n_views, n_views - n_drop, replace=False).tolist())


def _check_finite(loss, step, model, last_good, last_good_step):
    if not torch.isfinite(loss):
        model.load_state_dict(last_good)
        raise DivergenceError(f"loss became {float(loss.detach())} at step {step}", step=step,
                              last_good_step=last_good_step)


def train_stage1(stack: CloudLayerStack, dataset, plan: LiftPlan, cfg: TrainConfig,
                 callback=None) -> TrainLog:
    """Adam on encoder + conditioning + layer model with view dropping and photometric jitter."""
    if not dataset:
        raise ConfigError("stage-1 dataset is empty", field="train")
    opt = torch.optim.Adam(stack.parameters(), lr=cfg.learning_rate, betas=cfg.betas,
                           weight_decay=cfg.weight_decay)
    tlog = TrainLog()
    tlog.eval_losses.append((0, evaluate_stage1(stack, dataset, plan, cfg)))
    last_good = copy.deepcopy(stack.state_dict())
    stack.train()
    for step in range(cfg.steps):
        rng = rng_for(cfg.seed, "stage1-step", step)
        sample = dataset[int(rng.integers(len(dataset)))]
        views = _step_views(rng, plan.n_views, cfg.view_dropping)
        if cfg.photometric:
            imgs = images_to_tensor([augment(sample.hdr_views[v], int(rng.integers(2 ** 62)))
                                     for v in views])
        else:
            imgs = sample.display_views[views]
        for g in opt.param_groups:
            g["lr"] = cfg.lr_at(step)
        pred = stack(imgs, plan, views)
        loss, _ = loss_2d(pred, sample.targets, cfg)
        _check_finite(loss, step, stack, last_good, tlog.steps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(stack.parameters(), cfg.grad_clip)
        opt.step()
        tlog.losses.append(float(loss.detach()))
        tlog.steps = step + 1
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and step + 1 < cfg.steps:
            tlog.eval_losses.append((step + 1, evaluate_stage1(stack, dataset, plan, cfg)))
            last_good = copy.deepcopy(stack.state_dict())
        if callback is not None:
            callback(step, float(loss))
    stack.eval()
    if cfg.steps > 0:
        final = evaluate_stage1(stack, dataset, plan, cfg)
        if not math.isfinite(final):
            stack.load_state_dict(last_good)
            raise DivergenceError("evaluation loss is not finite after training",
                                  step=cfg.steps, last_good_step=tlog.eval_losses[-1][0])
        tlog.eval_losses.append((cfg.steps, final))
    return tlog
