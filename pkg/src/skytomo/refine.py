"""Column lifting of 2.5D maps to 3D, sparse voxel tokens, attention refiner, stage-2 training."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (BudgetExceededError, ConfigError, CorruptFileError, DependencyError,
                     DivergenceError, InputError)
from .features import _normalized_samples, images_to_tensor, lift_features, sample_views
from .geometry import GridSpec, LwcGrid, Rig
from .layernet import TrainConfig, TrainLog, predict_maps
from .maps import CloudMaps2p5D
from .optics import display
from .rng import rng_for, torch_seed_for

log = logging.getLogger(__name__)

DEFAULT_TOKEN_BUDGET = 8192


@dataclass
class LiftReport:
    grid: LwcGrid
    demoted_columns: list = field(default_factory=list)   # (ix, iy, reason)

    @property
    def n_demoted(self):
        return len(self.demoted_columns)


def lift_to_3d_report(maps: CloudMaps2p5D, spec: GridSpec) -> LiftReport:
    """Linearly increasing column profile between base and top, renormalized to the column LWP.

    A voxel at level ``z`` is filled when ``CBH < z * s_z < CBH + dH`` (level
    heights measured from the grid origin). Occupied columns with no such level
    or with non-positive thickness are left empty and listed in the report.
    """
    if maps.shape != tuple(spec.dims[:2]):
        raise InputError(f"maps shape {maps.shape} does not match grid footprint {spec.dims[:2]}")
    lwp = np.asarray(maps.lwp, dtype=np.float64)
    cbh = np.asarray(maps.cbh, dtype=np.float64)
    dh = np.asarray(maps.dh, dtype=np.float64)
    occ = maps.occupancy & (lwp > 0)
    rho = np.zeros(spec.dims)
    demoted = []
    bad = occ & ~(dh > 0)
    for ix, iy in zip(*np.nonzero(bad)):
        demoted.append((int(ix), int(iy), "non-positive thickness"))
    occ &= dh > 0
    z = spec.level_heights() - spec.origin[2]
    ix, iy = np.nonzero(occ)
    if len(ix):
        b, d, w = cbh[ix, iy][:, None], dh[ix, iy][:, None], lwp[ix, iy][:, None]
        inside = (z[None, :] > b) & (z[None, :] < b + d)
        prof = np.where(inside, (w / d) * (2.0 * (z[None, :] - b) / d), 0.0)
        s = spec.sz * prof.sum(axis=1)
        ok = s > 0
        for j in np.nonzero(~ok)[0]:
            demoted.append((int(ix[j]), int(iy[j]), "no level inside the layer"))
        prof[ok] *= (lwp[ix[ok], iy[ok]] / s[ok])[:, None]
        rho[ix[ok], iy[ok]] = prof[ok]
    if demoted:
        log.info("lift_to_3d: %d occupied columns left empty", len(demoted))
    return LiftReport(LwcGrid(spec, rho), demoted)


def lift_to_3d(maps: CloudMaps2p5D, spec: GridSpec) -> LwcGrid:
    return lift_to_3d_report(maps, spec).grid


def positional_encoding(indices, dims, per_axis=16, n_freq=8):
    """Sin/cos of ``2**k * pi * i / N_axis`` for k < n_freq on each axis; ``(M, 3 * per_axis)``."""
    if per_axis != 2 * n_freq:
        raise ConfigError("per_axis must equal 2 * n_freq")
    idx = np.asarray(indices, dtype=np.float64).reshape(-1, 3)
    out = np.empty((len(idx), 3 * per_axis))
    k = 2.0 ** np.arange(n_freq)
    for a in range(3):
        arg = idx[:, a:a + 1] * (k[None, :] * np.pi / dims[a])
        out[:, a * per_axis:a * per_axis + n_freq] = np.sin(arg)
        out[:, a * per_axis + n_freq:(a + 1) * per_axis] = np.cos(arg)
    return out


@dataclass
class SparseVoxelSet:
    """Strictly positive voxels of an initial grid, grouped into contiguous z-sorted columns."""

    spec: GridSpec
    indices: np.ndarray        # (M, 3) int64
    rho_init: np.ndarray       # (M,)
    features: np.ndarray       # (M, d) float32
    posenc: np.ndarray         # (M, 48)
    column_ids: np.ndarray     # (M,) index into column_xy
    column_xy: np.ndarray      # (C, 2)

    @property
    def M(self):
        return len(self.indices)

    @property
    def n_columns(self):
        return len(self.column_xy)

    def permuted(self, perm):
        perm = np.asarray(perm)
        return SparseVoxelSet(self.spec, self.indices[perm], self.rho_init[perm],
                              self.features[perm], self.posenc[perm], self.column_ids[perm],
                              self.column_xy)

    def column_slices(self):
        """Entry range of every column (valid for the unpermuted order)."""
        starts = np.searchsorted(self.column_ids, np.arange(self.n_columns))
        ends = np.append(starts[1:], self.M)
        return [slice(int(a), int(b)) for a, b in zip(starts, ends)]


def voxel_features(features, rig: Rig, spec: GridSpec, indices):
    """Mean over in-frustum views of bilinear feature samples at voxel-center projections."""
    idx = np.asarray(indices).reshape(-1, 3)
    pts = np.asarray(spec.origin) + (idx + 0.5) * np.asarray(spec.voxel_size)
    grids, masks = [], []
    for cam in rig:
        g, m = _normalized_samples(cam, pts)
        grids.append(torch.as_tensor(g, dtype=torch.float32))
        masks.append(torch.as_tensor(m))
    with torch.no_grad():
        mean, count = sample_views([f.detach().float() for f in features], grids, masks)
    return mean.T.numpy(), count.numpy()


def extract_sparse(init: LwcGrid, features, rig: Rig, budget=DEFAULT_TOKEN_BUDGET,
                   per_axis=16) -> SparseVoxelSet:
    spec = init.spec
    idx = np.argwhere(init.rho > 0)                  # x-major, then y, then z ascending
    if budget is not None and len(idx) > budget:
        raise BudgetExceededError(
            f"{len(idx)} occupied voxels exceed the token budget of {budget}; "
            "pool the initial grid or reconstruct a smaller scene")
    d = features[0].shape[0] if len(features) else 0
    if len(idx):
        feats, _ = voxel_features(features, rig, spec, idx)
    else:
        feats = np.zeros((0, d), dtype=np.float32)
    cols, col_ids = np.unique(idx[:, :2], axis=0, return_inverse=True)
    return SparseVoxelSet(spec, idx.astype(np.int64), init.rho[tuple(idx.T)].astype(np.float64),
                          feats.astype(np.float32), positional_encoding(idx, spec.dims, per_axis),
                          col_ids.reshape(-1).astype(np.int64), cols.reshape(-1, 2))


@dataclass
class RefineConfig:
    d_feat: int = 16
    pos_dim: int = 48
    width: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    rho_scale: float = 1e3      # kg m^-3 -> g m^-3 on the input token
    token_budget: int = DEFAULT_TOKEN_BUDGET

    def __post_init__(self):
        for name in ("width", "depth", "heads", "mlp_ratio", "pos_dim", "token_budget"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive", field=f"model.refine.{name}")
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads", field="model.refine.heads")


class _AttnBlock(nn.Module):
    def __init__(self, width, heads, mlp_ratio):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_ratio * width), nn.GELU(),
                                 nn.Linear(mlp_ratio * width, width))

    def forward(self, x):
        m, w = x.shape
        q, k, v = self.qkv(self.ln1(x)).reshape(m, 3, self.heads, w // self.heads).permute(1, 2, 0, 3)
        a = F.scaled_dot_product_attention(q[None], k[None], v[None])[0]
        x = x + self.proj(a.permute(1, 0, 2).reshape(m, w))
        return x + self.mlp(self.ln2(x))


class RefineModel(nn.Module):
    """Full self-attention over voxel tokens, one logit per token.

    The output head starts at zero and the logit carries a ``log(rho_init)``
    skip, so an untrained model reproduces the initial grid exactly after the
    column softmax.
    """

    def __init__(self, cfg: RefineConfig = None, seed=0):
        super().__init__()
        self.cfg = cfg = cfg or RefineConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(torch_seed_for(seed, "refine-init"))
            self.inp = nn.Linear(1 + cfg.d_feat + cfg.pos_dim, cfg.width)
            self.blocks = nn.ModuleList(_AttnBlock(cfg.width, cfg.heads, cfg.mlp_ratio)
                                        for _ in range(cfg.depth))
            self.ln = nn.LayerNorm(cfg.width)
            self.out = nn.Linear(cfg.width, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, rho_init, feats, pos):
        dtype = self.inp.weight.dtype
        rho_init, feats, pos = rho_init.to(dtype), feats.to(dtype), pos.to(dtype)
        if feats.shape[-1] != self.cfg.d_feat:
            raise ConfigError(f"refiner expects {self.cfg.d_feat} feature channels, "
                              f"got {feats.shape[-1]}", field="model.refine.d_feat")
        x = self.inp(torch.cat([(rho_init * self.cfg.rho_scale)[:, None], feats, pos], dim=-1))
        for blk in self.blocks:
            x = blk(x)
        return self.out(self.ln(x))[:, 0] + torch.log(rho_init)


def column_softmax(logits, column_ids, n_columns):
    """Softmax of ``logits`` within each column group."""
    cid = torch.as_tensor(column_ids, dtype=torch.long)
    mx = torch.full((n_columns,), -torch.inf, dtype=logits.dtype)
    mx = mx.scatter_reduce(0, cid, logits.detach(), reduce="amax", include_self=True)
    e = torch.exp(logits - mx[cid])
    den = torch.zeros(n_columns, dtype=logits.dtype).index_add(0, cid, e)
    return e / den[cid]


def column_lwp(sparse: SparseVoxelSet, maps: CloudMaps2p5D):
    """Target LWP for each sparse token's column."""
    xy = sparse.column_xy
    lwp = np.asarray(maps.lwp, dtype=np.float64)[xy[:, 0], xy[:, 1]] if len(xy) else np.zeros(0)
    if np.any(lwp <= 0):
        raise InputError("sparse column without positive LWP")
    return lwp


def tensors_for(sparse: SparseVoxelSet, maps: CloudMaps2p5D, dtype=torch.float32):
    lwp_col = torch.as_tensor(column_lwp(sparse, maps), dtype=dtype)
    return {
        "rho_init": torch.as_tensor(sparse.rho_init, dtype=dtype),
        "features": torch.as_tensor(sparse.features, dtype=dtype),
        "posenc": torch.as_tensor(sparse.posenc, dtype=dtype),
        "lwp_token": lwp_col[torch.as_tensor(sparse.column_ids)],
    }


def refine_values(logits, sparse: SparseVoxelSet, lwp_token, sz):
    """Per-token density from logits: column softmax times the column LWP over ``s_z``."""
    w = column_softmax(logits, sparse.column_ids, sparse.n_columns)
    return w * lwp_token / sz


def refine_tokens(model: RefineModel, sparse: SparseVoxelSet, tensors):
    logits = model(tensors["rho_init"], tensors["features"], tensors["posenc"])
    return refine_values(logits, sparse, tensors["lwp_token"], sparse.spec.sz)


def scatter_tokens(values, sparse: SparseVoxelSet) -> np.ndarray:
    rho = np.zeros(sparse.spec.dims)
    if sparse.M:
        rho[tuple(sparse.indices.T)] = np.asarray(values, dtype=np.float64)
    return rho


def refine(model: RefineModel, sparse: SparseVoxelSet, maps: CloudMaps2p5D,
           spec: GridSpec = None) -> LwcGrid:
    spec = spec or sparse.spec
    if sparse.M == 0:
        return LwcGrid.zeros(spec)
    if sparse.M > model.cfg.token_budget:
        raise BudgetExceededError(f"{sparse.M} tokens exceed the budget of {model.cfg.token_budget}")
    dtype = model.inp.weight.dtype
    with torch.no_grad():
        vals = refine_tokens(model, sparse, tensors_for(sparse, maps, dtype))
    return LwcGrid(spec, scatter_tokens(vals.double().numpy(), sparse))


def loss_3d(pred, target):
    """Mean absolute error over all voxels (tensors or arrays of equal shape)."""
    if tuple(pred.shape) != tuple(target.shape):
        raise InputError(f"grid shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if torch.is_tensor(pred) or torch.is_tensor(target):
        return (torch.as_tensor(pred) - torch.as_tensor(target)).abs().mean()
    return float(np.abs(np.asarray(pred, float) - np.asarray(target, float)).mean())


@dataclass
class Stage2Sample:
    """Frozen stage-1 products for one scene plus the target grid."""

    sparse: SparseVoxelSet
    maps: CloudMaps2p5D
    target: np.ndarray
    tensors: dict = None
    target_tokens: torch.Tensor = None
    off_support: float = 0.0
    n_voxels: int = 0

    def __post_init__(self):
        self.tensors = tensors_for(self.sparse, self.maps)
        t = np.asarray(self.target, dtype=np.float64)
        on = np.zeros(t.shape, dtype=bool)
        if self.sparse.M:
            on[tuple(self.sparse.indices.T)] = True
        self.target_tokens = torch.as_tensor(t[tuple(self.sparse.indices.T)], dtype=torch.float32)
        self.off_support = float(np.abs(t[~on]).sum())
        self.n_voxels = t.size


def sparse_loss_3d(values, sample: Stage2Sample):
    """Same value as :func:`loss_3d` on the scattered grid, computed on the support only."""
    on = (values - sample.target_tokens.to(values.dtype)).abs().sum()
    return (on + sample.off_support) / sample.n_voxels


def stage2_inputs(stack, hdr_views, plan, rig: Rig, budget=DEFAULT_TOKEN_BUDGET):
    """Run the frozen stage-1 stack: predicted maps, initial grid and sparse tokens."""
    spec = plan.spec
    imgs = images_to_tensor([display(v) for v in hdr_views])
    with torch.no_grad():
        feats = stack.encoder(imgs)
        vol = lift_features(list(feats), plan)
        outputs = stack.layer(stack.flat_input(vol, plan, imgs.shape[0]))
    top = spec.dims[2] * spec.sz
    maps = predict_maps(outputs, grid_top=top)
    report = lift_to_3d_report(maps, spec)
    sparse = extract_sparse(report.grid, list(feats), rig, budget)
    return maps, report, sparse


def evaluate_stage2(model, dataset):
    with torch.no_grad():
        return float(np.mean([float(sparse_loss_3d(refine_tokens(model, s.sparse, s.tensors), s))
                              for s in dataset]))


def baseline_stage2(dataset):
    """L_3D of the unrefined initial grids."""
    return float(np.mean([float(sparse_loss_3d(s.tensors["rho_init"].double(), s))
                          for s in dataset]))


def train_stage2(model: RefineModel, dataset, cfg: TrainConfig, frozen=None,
                 callback=None) -> TrainLog:
    """Adam on the refiner only; ``frozen`` (the stage-1 stack) must not change."""
    if frozen is None:
        raise DependencyError("stage 2 needs a trained stage-1 stack (run train-layer first)")
    if not dataset:
        raise ConfigError("stage-2 dataset is empty", field="train")
    for p in frozen.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas,
                           weight_decay=cfg.weight_decay)
    tlog = TrainLog()
    tlog.eval_losses.append((0, evaluate_stage2(model, dataset)))
    last_good = copy.deepcopy(model.state_dict())
    model.train()
    for step in range(cfg.steps):
        rng = rng_for(cfg.seed, "stage2-step", step)
        s = dataset[int(rng.integers(len(dataset)))]
        if s.sparse.M == 0:
            tlog.losses.append(float(s.off_support / s.n_voxels))
            tlog.steps = step + 1
            continue
        for g in opt.param_groups:
            g["lr"] = cfg.lr_at(step)
        loss = sparse_loss_3d(refine_tokens(model, s.sparse, s.tensors), s)
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            raise DivergenceError(f"loss became {float(loss.detach())} at step {step}", step=step,
                                  last_good_step=tlog.steps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        tlog.losses.append(float(loss.detach()))
        tlog.steps = step + 1
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and step + 1 < cfg.steps:
            tlog.eval_losses.append((step + 1, evaluate_stage2(model, dataset)))
            last_good = copy.deepcopy(model.state_dict())
        if callback is not None:
            callback(step, tlog.losses[-1])
    model.eval()
    if cfg.steps > 0:
        tlog.eval_losses.append((cfg.steps, evaluate_stage2(model, dataset)))
    return tlog


def write_sparse(path, sparse: SparseVoxelSet, values=None):
    """Debug dump: uint64 count, int32 (x, y, z) triples, float32 values, little-endian."""
    vals = sparse.rho_init if values is None else np.asarray(values)
    with open(path, "wb") as f:
        f.write(np.uint64(sparse.M).astype("<u8").tobytes())
        f.write(sparse.indices.astype("<i4").tobytes())
        f.write(vals.astype("<f4").tobytes())


def read_sparse(path):
    raw = open(path, "rb").read()
    if len(raw) < 8:
        raise CorruptFileError(f"{path}: truncated sparse file")
    m = int(np.frombuffer(raw[:8], "<u8")[0])
    if len(raw) != 8 + 16 * m:
        raise CorruptFileError(f"{path}: expected {8 + 16 * m} bytes, found {len(raw)}")
    idx = np.frombuffer(raw[8:8 + 12 * m], "<i4").reshape(m, 3).astype(np.int64)
    vals = np.frombuffer(raw[8 + 12 * m:], "<f4").astype(np.float64)
    return idx, vals
