"""Time the compiled and numpy implementations of the hot kernels on identical inputs.

    python benchmarks/bench_kernels.py [--repeat 3]
"""
import argparse
import time

import numpy as np

from skytomo import kernels
from skytomo.cloudgen import SceneParams, generate_scene
from skytomo.geometry import GridSpec, default_rig
from skytomo.optics import SunModel, _active_slab, _ray_interval, lwc_to_extinction, sun_optical_depth


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def march_case():
    spec = GridSpec(dims=(64, 64, 64))
    grid = generate_scene(SceneParams(seed=7, coverage_target=0.2, base_height_range=(400, 1000),
                                      thickness_range=(75, 300), cell_radius_range=(100, 300)), spec)
    ext = lwc_to_extinction(grid)
    sun = SunModel.from_angles(50, 135)
    sod = sun_optical_depth(ext, sun)
    cam = default_rig(spec)[0]
    vv, uu = np.meshgrid(np.arange(64.0), np.arange(64.0), indexing="ij")
    dirs = cam.pixel_rays(np.stack([uu, vv], axis=-1)).reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.center, dirs.shape).copy()
    z_lo, z_hi, _, _ = _active_slab(spec, ext.beta)
    t0, t1 = _ray_interval(origins, dirs, z_lo, z_hi, 20_000.0)
    return (origins, dirs, t0, t1, ext.beta, sod, spec.origin, spec.voxel_size, 12.5, True, True)


def ncc_case():
    rng = np.random.default_rng(0)
    image = rng.random((200, 200))
    template = image[90:111, 90:111].copy()
    return template, image, 100, 100, 16


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    impls = kernels.backends()
    print(f"selected backend: {kernels.BACKEND}")
    cases = {"march_rays (64x64 view)": ("march_rays", march_case()),
             "ncc_scores (21px, +-16)": ("ncc_scores", ncc_case())}
    for label, (fname, case) in cases.items():
        ref = None
        row = []
        for name, mod in impls.items():
            t, out = _best(lambda: getattr(mod, fname)(*case), args.repeat)
            out = np.concatenate([np.ravel(o) for o in out]) if isinstance(out, tuple) else np.ravel(out)
            diff = 0.0 if ref is None else float(np.max(np.abs(out - ref)))
            ref = out if ref is None else ref
            row.append(f"{name}: {t * 1e3:8.1f} ms (max diff {diff:.1e})")
        print(f"{label:26s} " + " | ".join(row))


if __name__ == "__main__":
    main()
