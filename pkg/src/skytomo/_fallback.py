"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same functions with the same argument order; the
selection happens in :mod:`skytomo.kernels`.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _axis_weights(p, o, s, n, periodic):
    g = (p - o) / s - 0.5
    if periodic:
        i0f = np.floor(g)
        f = g - i0f
        i0 = i0f.astype(np.int64) % n
        i1 = (i0 + 1) % n
        inside = np.ones(p.shape, dtype=bool)
    else:
        inside = (p >= o) & (p <= o + n * s)
        gc = np.clip(g, 0.0, n - 1.0)
        i0 = np.minimum(np.floor(gc).astype(np.int64), n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        f = gc - i0
    return i0, i1, f, inside


def sample_trilinear(grid, px, py, pz, origin, voxel, periodic):
    """Trilinear lookup of voxel-centered ``grid``; zero outside the vertical slab.

    Horizontally the grid repeats when ``periodic``; vertically values are held
    constant between the outermost level centers and the volume faces.
    """
    nx, ny, nz = grid.shape
    x0, x1, fx, inx = _axis_weights(px, origin[0], voxel[0], nx, periodic)
    y0, y1, fy, iny = _axis_weights(py, origin[1], voxel[1], ny, periodic)
    z0, z1, fz, inz = _axis_weights(pz, origin[2], voxel[2], nz, False)
    out = ((1 - fx) * (1 - fy) * (1 - fz) * grid[x0, y0, z0]
           + fx * (1 - fy) * (1 - fz) * grid[x1, y0, z0]
           + (1 - fx) * fy * (1 - fz) * grid[x0, y1, z0]
           + fx * fy * (1 - fz) * grid[x1, y1, z0]
           + (1 - fx) * (1 - fy) * fz * grid[x0, y0, z1]
           + fx * (1 - fy) * fz * grid[x1, y0, z1]
           + (1 - fx) * fy * fz * grid[x0, y1, z1]
           + fx * fy * fz * grid[x1, y1, z1])
    return np.where(inx & iny & inz, out, 0.0)


def march_rays(origins, dirs, t0, t1, beta, sun_od, origin, voxel, step, periodic,
               with_scatter):
    """Fixed-step trapezoidal march of every ray over ``[t0, t1]``.

    Returns ``(optical_depth, scatter)`` where ``scatter`` is
    ``sum_i T_before_i * (1 - exp(-tau_i)) * mean(T_sun at segment ends)``.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    length = np.maximum(t1 - t0, 0.0)
    nsteps = np.ceil(length / step).astype(np.int64)
    dt = np.where(nsteps > 0, length / np.maximum(nsteps, 1), 0.0)
    od = np.zeros(len(origins))
    scatter = np.zeros(len(origins))
    if len(origins) == 0 or nsteps.max(initial=0) == 0:
        return od, scatter

    def sample(g, t):
        p = origins + t[:, None] * dirs
        return sample_trilinear(g, p[:, 0], p[:, 1], p[:, 2], origin, voxel, periodic)

    b_prev = sample(beta, t0)
    ts_prev = np.exp(-sample(sun_od, t0)) if with_scatter else None
    for k in range(1, int(nsteps.max()) + 1):
        active = nsteps >= k
        t = t0 + k * dt
        b = sample(beta, t)
        tau = np.where(active, 0.5 * (b_prev + b) * dt, 0.0)
        if with_scatter:
            ts = np.exp(-sample(sun_od, t))
            scatter += np.exp(-od) * (1.0 - np.exp(-tau)) * 0.5 * (ts_prev + ts)
            ts_prev = ts
        od += tau
        b_prev = b
    return od, scatter


def ncc_scores(template, image, cx, cy, radius):
    """NCC of ``template`` against windows centred at ``(cx+dx, cy+dy)``, |d| <= radius.

    Windows that do not fit inside ``image`` score -2.
    """
    template = np.asarray(template, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    p = template.shape[0]
    half = p // 2
    n = 2 * radius + 1
    scores = np.full((n, n), -2.0)
    nx, ny = image.shape
    lo_x, hi_x = max(cx - radius, half), min(cx + radius, nx - 1 - half)
    lo_y, hi_y = max(cy - radius, half), min(cy + radius, ny - 1 - half)
    if lo_x > hi_x or lo_y > hi_y:
        return scores
    region = image[lo_x - half:hi_x + half + 1, lo_y - half:hi_y + half + 1]
    win = sliding_window_view(region, (p, p))
    t = template - template.mean()
    tn = np.sqrt((t * t).sum())
    wm = win.mean(axis=(2, 3))
    wc = win - wm[..., None, None]
    wn = np.sqrt((wc * wc).sum(axis=(2, 3)))
    num = (wc * t).sum(axis=(2, 3))
    denom = wn * tn
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-12, num / denom, 0.0)
    scores[lo_x - (cx - radius):hi_x - (cx - radius) + 1,
           lo_y - (cy - radius):hi_y - (cy - radius) + 1] = s
    return scores
