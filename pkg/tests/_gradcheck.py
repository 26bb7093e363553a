"""Central finite-difference checks of autograd gradients along random directions."""
import copy

import torch


def _directions(params, gen):
    dirs = [torch.randn(p.shape, generator=gen, dtype=torch.float64) for p in params]
    norm = torch.sqrt(sum((d ** 2).sum() for d in dirs))
    return [d / norm for d in dirs]


def _central(loss_fn, params, dirs, eps):
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(eps * d.to(p.dtype))
        up = float(loss_fn())
        for p, d in zip(params, dirs):
            p.sub_(2 * eps * d.to(p.dtype))
        down = float(loss_fn())
        for p, d in zip(params, dirs):
            p.add_(eps * d.to(p.dtype))
    return (up - down) / (2 * eps)


def _compare(grads, fd_fn, params, seed, n_dirs):
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = _directions(params, gen)
        analytic = float(sum((g.double() * d).sum() for g, d in zip(grads, dirs)))
        numeric = fd_fn(dirs)
        scale = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def directional_error(loss_fn, params, eps, seed=0, n_dirs=3):
    """Worst relative error between autograd and central differences, same precision."""
    params = [p for p in params if p.requires_grad]
    grads = torch.autograd.grad(loss_fn(), params)
    return _compare(grads, lambda d: _central(loss_fn, params, d, eps), params, seed, n_dirs)


def single_precision_error(module, loss_fn, eps=1e-6, seed=0, n_dirs=3):
    """Float32 autograd gradient of ``loss_fn(module, dtype)`` against float64 central differences.

    The reference differences run on a float64 copy of the same weights, so the
    comparison measures the error of the single-precision backward pass rather
    than float32 cancellation noise in the difference quotient.
    """
    module = module.float()
    params = [p for p in module.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss_fn(module, torch.float32), params)
    ref = copy.deepcopy(module).double()
    ref_params = [p for p in ref.parameters() if p.requires_grad]
    fd = lambda d: _central(lambda: loss_fn(ref, torch.float64), ref_params, d, eps)  # noqa: E731
    return _compare(grads, fd, params, seed, n_dirs)
