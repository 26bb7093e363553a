"""Stage runners behind the command line; every output is a function of config, seed and inputs."""
from __future__ import annotations

import logging
import os
import time

import numpy as np
import torch

from . import io
from .cloudgen import advect, derive_maps, generate_scene
from .config import PipelineConfig, save_config, to_dict
from .errors import ConfigError, DependencyError
from .evaluation import column_metrics, emit_report, map_metrics, simulate_radar
from .features import LiftPlan
from .geometry import LwcGrid, Rig, default_rig
from .layernet import CloudLayerStack, LayerNetConfig, TrainingSample, train_stage1
from .optics import (OpticalParams, SunModel, display, lwc_to_extinction, render,
                     sun_optical_depth)
from .refine import (RefineConfig, RefineModel, Stage2Sample, baseline_stage2, loss_3d, refine,
                     stage2_inputs, train_stage2)
from .rng import rng_for
from .wind import retrieve_wind

log = logging.getLogger(__name__)


class Layout:
    """Paths of every artifact under the output root."""

    def __init__(self, root):
        self.root = root

    def p(self, *parts):
        return os.path.join(self.root, *parts)

    config = property(lambda s: s.p("config.json"))
    rig = property(lambda s: s.p("rig.json"))
    manifest = property(lambda s: s.p("manifest.json"))
    stage1 = property(lambda s: s.p("checkpoints", "stage1.json"))
    stage2 = property(lambda s: s.p("checkpoints", "stage2.json"))
    wind_csv = property(lambda s: s.p("wind", "profile.csv"))
    eval_dir = property(lambda s: s.p("eval"))
    summary = property(lambda s: s.p("summary.json"))

    def scene(self, i):
        return self.p("scenes", f"scene_{i:03d}.lwc")

    def frame(self, k):
        return self.p("sequence", f"frame_{k:03d}.lwc")

    def views(self, name):
        return self.p("views", name)

    def view(self, name, v, ext="pfm"):
        return self.p("views", name, f"view_{v}.{ext}")

    def recon(self, name):
        return self.p("recon", f"{name}.lwc")


def scene_name(i):
    return f"scene_{i:03d}"


def frame_name(k):
    return f"frame_{k:03d}"


def _require(path, stage):
    if not os.path.exists(path):
        raise DependencyError(f"missing {path}; run `{stage}` first")


def _rig(cfg: PipelineConfig) -> Rig:
    if cfg.rig.path:
        return io.read_rig(cfg.rig.path)
    r = cfg.rig
    return default_rig(cfg.grid.spec(), r.n_pairs, r.width, r.height, r.fov_deg, r.radius_factor,
                       r.baseline_factor, None if r.elevation_deg < 0 else r.elevation_deg)


def _sun(cfg: PipelineConfig) -> SunModel:
    o = cfg.optics
    return SunModel.from_angles(o.sun_elevation_deg, o.sun_azimuth_deg,
                                sky_radiance=o.sky_radiance, sun_radiance=o.sun_radiance)


def _manifest(L: Layout):
    _require(L.manifest, "gen")
    return io.read_json(L.manifest)


# -- gen ---------------------------------------------------------------------------

def run_gen(cfg: PipelineConfig):
    """Independent training scenes plus an advected sequence built from scene 0."""
    L = Layout(cfg.output)
    spec = cfg.grid.spec()
    save_config(L.config, cfg)
    rig = _rig(cfg)
    rig.check_outside(spec)
    io.write_rig(L.rig, rig)
    scenes = []
    for i in range(cfg.scene.n_scenes):
        seed_i = cfg.seed if i == 0 else int(rng_for(cfg.seed, "scene", i).integers(2 ** 31))
        grid = generate_scene(cfg.scene.params(seed_i), spec)
        io.write_grid(L.scene(i), grid, {"seed": seed_i, "name": scene_name(i)})
        scenes.append({"name": scene_name(i), "seed": seed_i, "file": os.path.relpath(L.scene(i), L.root),
                       "sha256": io.file_sha256(L.scene(i))})
        if i == 0:
            base = grid
    times = [k * cfg.scene.spacing for k in range(cfg.scene.n_frames)]
    frames = []
    for k, t in enumerate(times):
        g = advect(base, cfg.scene.velocity, t)
        io.write_grid(L.frame(k), g, {"time_s": t, "name": frame_name(k)})
        frames.append({"name": frame_name(k), "time_s": t, "file": os.path.relpath(L.frame(k), L.root),
                       "sha256": io.file_sha256(L.frame(k))})
    manifest = {"seed": cfg.seed, "grid": spec.to_dict(), "scene_params": to_dict(cfg.scene),
                "velocity_ms": list(cfg.scene.velocity), "scenes": scenes, "frames": frames}
    io.write_json(L.manifest, manifest)
    log.info("gen: %d scenes, %d frames -> %s", len(scenes), len(frames), L.root)
    return manifest


def _all_targets(man):
    return ([(s["name"], s["file"]) for s in man["scenes"]] +
            [(f["name"], f["file"]) for f in man["frames"]])


# -- render ------------------------------------------------------------------------

def run_render(cfg: PipelineConfig, names=None):
    L = Layout(cfg.output)
    man = _manifest(L)
    _require(L.rig, "gen")
    rig = io.read_rig(L.rig)
    sun = _sun(cfg)
    o = cfg.optics
    optical = OpticalParams(o.droplet_radius, o.water_density, o.q_scat)
    done = []
    for name, rel in _all_targets(man):
        if names is not None and name not in names:
            continue
        grid = io.read_grid(L.p(rel))
        ext = lwc_to_extinction(grid, optical)
        sod = sun_optical_depth(ext, sun, step=o.step, periodic=o.periodic)
        for v, cam in enumerate(rig):
            res = render(cam, ext, sun, step=o.step, periodic=o.periodic, sun_od=sod)
            for w in res.warnings:
                log.warning("render %s view %d: %s", name, v, w)
            io.write_pfm(L.view(name, v), res.image)
            io.write_png(L.view(name, v, "png"), display(res.image))
        done.append(name)
    log.info("render: %d targets x %d views", len(done), len(rig))
    return done


def _views(L: Layout, name, n_views):
    paths = [L.view(name, v) for v in range(n_views)]
    for p in paths:
        _require(p, "render")
    return [io.read_pfm(p) for p in paths], paths


# -- stage 1 -----------------------------------------------------------------------

def _plan(cfg, rig):
    return LiftPlan.build(rig, cfg.sweep.sweep(), cfg.grid.spec())


def _training_names(cfg, man):
    names = [s["name"] for s in man["scenes"]]
    stride = cfg.scene.train_sequence_stride
    if stride > 0:
        names += [f["name"] for k, f in enumerate(man["frames"]) if k > 0 and k % stride == 0]
    return names


def _truth(L, man, name):
    for n, rel in _all_targets(man):
        if n == name:
            return io.read_grid(L.p(rel))
    raise ConfigError(f"unknown target {name}")


def _stage1_dataset(cfg, L, man, rig):
    data = []
    for name in _training_names(cfg, man):
        views, _ = _views(L, name, len(rig))
        data.append((name, TrainingSample(views, derive_maps(_truth(L, man, name)))))
    return data


def run_train_layer(cfg: PipelineConfig):
    L = Layout(cfg.output)
    man = _manifest(L)
    _require(L.rig, "gen")
    rig = io.read_rig(L.rig)
    plan = _plan(cfg, rig)
    named = _stage1_dataset(cfg, L, man, rig)
    stack = CloudLayerStack(cfg.model.layer, seed=cfg.seed)
    tcfg = cfg.train1
    t0 = time.time()
    tlog = train_stage1(stack, [s for _, s in named], plan, tcfg)
    elapsed = time.time() - t0
    inputs = io.input_manifest([L.rig, L.manifest] + [L.view(n, v) for n, _ in named for v in range(len(rig))])
    io.write_checkpoint(L.stage1, stack.state_dict(),
                        config={"layer": to_dict(cfg.model.layer), "sweep": list(plan.heights),
                                "grid": cfg.grid.spec().to_dict(), "train": to_dict(tcfg)},
                        step=tlog.steps, seed=cfg.seed, extra={"inputs": inputs})
    io.write_json(L.p("logs", "stage1.json"), {"losses": tlog.losses, "eval_losses": tlog.eval_losses,
                                               "training_scenes": [n for n, _ in named],
                                               "seconds": elapsed})
    log.info("train-layer: %d steps, eval loss %.4g -> %.4g", tlog.steps, tlog.initial_eval,
             tlog.final_eval)
    return tlog


def load_stack(L: Layout, cfg: PipelineConfig):
    _require(L.stage1, "train-layer")
    meta, arrays = io.read_checkpoint(L.stage1)
    lcfg = LayerNetConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                             for k, v in meta["config"]["layer"].items()})
    if list(meta["config"]["sweep"]) != list(cfg.sweep.sweep().heights):
        raise ConfigError("stage-1 checkpoint was trained with a different height sweep", field="sweep")
    stack = CloudLayerStack(lcfg, seed=meta["seed"])
    io.load_state(stack, arrays)
    stack.eval()
    for p in stack.parameters():
        p.requires_grad_(False)
    return stack


# -- stage 2 -----------------------------------------------------------------------

def _stage2_dataset(cfg, L, man, rig, stack, plan):
    data = []
    budget = cfg.model.refine.token_budget
    for name in _training_names(cfg, man):
        views, _ = _views(L, name, len(rig))
        maps, report, sparse = stage2_inputs(stack, views, plan, rig, budget)
        if report.n_demoted:
            log.info("%s: %d predicted columns dropped during lifting", name, report.n_demoted)
        data.append((name, Stage2Sample(sparse, maps, _truth(L, man, name).rho)))
    return data


def run_train_refine(cfg: PipelineConfig):
    L = Layout(cfg.output)
    man = _manifest(L)
    _require(L.stage1, "train-layer")
    rig = io.read_rig(L.rig)
    plan = _plan(cfg, rig)
    stack = load_stack(L, cfg)
    before = {k: v.clone() for k, v in stack.state_dict().items()}
    named = _stage2_dataset(cfg, L, man, rig, stack, plan)
    data = [s for _, s in named]
    model = RefineModel(cfg.model.refine, seed=cfg.seed)
    tcfg = cfg.train2
    t0 = time.time()
    base = baseline_stage2(data)
    tlog = train_stage2(model, data, tcfg, frozen=stack)
    elapsed = time.time() - t0
    frozen_ok = all(torch.equal(before[k], v) for k, v in stack.state_dict().items())
    io.write_checkpoint(L.stage2, model.state_dict(),
                        config={"refine": to_dict(cfg.model.refine), "train": to_dict(tcfg)},
                        step=tlog.steps, seed=cfg.seed,
                        extra={"inputs": io.input_manifest([L.stage1, L.manifest])})
    io.write_json(L.p("logs", "stage2.json"), {
        "losses": tlog.losses, "eval_losses": tlog.eval_losses, "baseline_l3d": base,
        "tokens": {n: s.sparse.M for n, s in named}, "frozen_unchanged": frozen_ok,
        "seconds": elapsed})
    log.info("train-refine: %d steps, L3D %.4g (baseline %.4g)", tlog.steps, tlog.final_eval, base)
    return tlog, base


def load_refiner(L: Layout):
    _require(L.stage2, "train-refine")
    meta, arrays = io.read_checkpoint(L.stage2)
    rcfg = RefineConfig(**meta["config"]["refine"])
    model = RefineModel(rcfg, seed=meta["seed"])
    io.load_state(model, arrays)
    model.eval()
    return model


# -- inference ---------------------------------------------------------------------

def run_infer(cfg: PipelineConfig, names=None, use_refiner=True):
    """Reconstruct every rendered target (scenes and sequence frames)."""
    L = Layout(cfg.output)
    man = _manifest(L)
    rig = io.read_rig(L.rig)
    plan = _plan(cfg, rig)
    stack = load_stack(L, cfg)
    model = load_refiner(L) if use_refiner else None
    spec = cfg.grid.spec()
    out = {}
    for name, _ in _all_targets(man):
        if names is not None and name not in names:
            continue
        views, paths = _views(L, name, len(rig))
        budget = model.cfg.token_budget if model is not None else None
        maps, report, sparse = stage2_inputs(stack, views, plan, rig, budget)
        grid = refine(model, sparse, maps, spec) if model is not None else report.grid
        ckpts = [L.stage1] + ([L.stage2] if model is not None else [])
        io.write_grid(L.recon(name), LwcGrid(spec, grid.rho.astype(np.float32)),
                      {"name": name, "refined": model is not None, "tokens": sparse.M,
                       "demoted_columns": report.n_demoted,
                       "inputs": io.input_manifest(ckpts + paths)})
        out[name] = {"tokens": sparse.M, "demoted_columns": report.n_demoted,
                     "initial": report.grid, "final": grid}
    log.info("infer: %d targets", len(out))
    return out


# -- wind --------------------------------------------------------------------------

def _sequence(L, man, recon=True):
    times = [f["time_s"] for f in man["frames"]]
    grids = []
    for f in man["frames"]:
        path = L.recon(f["name"]) if recon else L.p(f["file"])
        _require(path, "infer" if recon else "gen")
        grids.append(io.read_grid(path))
    return times, grids


def wind_levels(grid: LwcGrid, stride, half=2):
    nz = grid.spec.dims[2]
    filled = grid.rho.reshape(-1, nz).max(axis=0) > 0
    return [h for h in range(half, nz - half, stride) if filled[h - half:h + half + 1].any()]


def run_wind(cfg: PipelineConfig, use_truth=False):
    L = Layout(cfg.output)
    man = _manifest(L)
    times, grids = _sequence(L, man, recon=not use_truth)
    params = cfg.wind.params
    levels = wind_levels(grids[0], cfg.wind.level_stride, params.slice_levels // 2)
    prof = retrieve_wind(times, grids, levels, params, seed=cfg.seed)
    io.write_wind_csv(L.wind_csv, prof)
    log.info("wind: %d buckets", len(prof.buckets))
    return prof


# -- eval --------------------------------------------------------------------------

def run_eval(cfg: PipelineConfig):
    L = Layout(cfg.output)
    man = _manifest(L)
    spec = cfg.grid.spec()
    e = cfg.eval
    loc = (spec.origin[0] + spec.extent[0] / 2 if e.radar_x < 0 else e.radar_x,
           spec.origin[1] + spec.extent[1] / 2 if e.radar_y < 0 else e.radar_y)
    times, pred = _sequence(L, man, recon=True)
    _, truth = _sequence(L, man, recon=False)
    rt = simulate_radar(times, truth, loc, e.bin_size, e.top, e.tick)
    rp = simulate_radar(times, pred, loc, e.bin_size, e.top, e.tick)
    radar = column_metrics(rp, rt)
    paths = emit_report(radar, L.eval_dir, e.figures, rt, rp, e.dpi, (e.fig_width, e.fig_height),
                        name="radar_metrics")
    name0 = man["scenes"][0]["name"]
    _require(L.recon(name0), "infer")
    mm = map_metrics(io.read_grid(L.recon(name0)), _truth(L, man, name0))
    paths.update({f"map_{k}": v for k, v in
                  emit_report(mm, L.eval_dir, False, name="map_metrics").items()})
    log.info("eval: radar F1 %.3f, map F1 %.3f", radar.occ_f1, mm.occ_f1)
    return radar, mm, paths


# -- demo --------------------------------------------------------------------------

def _wind_errors(prof, velocity):
    true = np.asarray(velocity, dtype=float)
    sp = float(np.hypot(*true))
    out = []
    for t, h, e in prof.rows():
        if e.empty:
            out.append({"bucket_s": t, "height_m": h, "empty": True})
            continue
        d = (np.degrees(np.arctan2(e.u, e.v)) - np.degrees(np.arctan2(true[0], true[1])) + 180) % 360 - 180
        out.append({"bucket_s": t, "height_m": h, "u_ms": e.u, "v_ms": e.v, "n_tracks": e.n_tracks,
                    "speed_rel_error": abs(e.speed - sp) / sp if sp > 0 else None,
                    "direction_error_deg": float(abs(d))})
    return out


def run_demo(cfg: PipelineConfig):
    """gen -> render -> train-layer -> train-refine -> infer -> wind -> eval, plus a summary."""
    t0 = time.time()
    L = Layout(cfg.output)
    run_gen(cfg)
    run_render(cfg)
    tlog1 = run_train_layer(cfg)
    tlog2, base = run_train_refine(cfg)
    man = _manifest(L)
    name0 = man["scenes"][0]["name"]
    inf = run_infer(cfg)
    prof = run_wind(cfg)
    radar, mm, _ = run_eval(cfg)
    truth0 = _truth(L, man, name0)
    s2 = io.read_json(L.p("logs", "stage2.json"))
    summary = {
        "seed": cfg.seed,
        "training_scene": name0,
        "stage1": {"steps": tlog1.steps, "initial_loss": tlog1.initial_eval,
                   "final_loss": tlog1.final_eval,
                   "loss_ratio": tlog1.final_eval / tlog1.initial_eval},
        "stage2": {"steps": tlog2.steps, "baseline_l3d": base, "final_l3d": tlog2.final_eval,
                   "frozen_unchanged": s2["frozen_unchanged"],
                   "scene_baseline_l3d": loss_3d(inf[name0]["initial"].rho, truth0.rho),
                   "scene_refined_l3d": loss_3d(inf[name0]["final"].rho, truth0.rho)},
        "map_metrics": mm.to_dict(),
        "radar_metrics": radar.to_dict(),
        "wind": _wind_errors(prof, cfg.scene.velocity),
        "runtime_s": time.time() - t0,
    }
    io.write_json(L.summary, summary)
    return summary
