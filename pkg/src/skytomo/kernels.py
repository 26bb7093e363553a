"""Kernel selection: compiled Cython core when importable, numpy fallback otherwise.

Set ``SKYTOMO_PURE_PYTHON=1`` to force the fallback.
"""
import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("SKYTOMO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")

BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else _fallback

march_rays = _impl.march_rays
ncc_scores = _impl.ncc_scores
sample_trilinear = _fallback.sample_trilinear


def backends():
    """Available implementations, keyed by name."""
    out = {"numpy": _fallback}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
