"""Named, counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by an
integer seed plus a tuple of names, so streams are independent of call order
and of thread count.
"""
import zlib

import numpy as np


def _name_key(names):
    return [zlib.crc32(str(n).encode("utf-8")) for n in names]


def rng_for(seed, *names):
    """Return a ``numpy.random.Generator`` for ``(seed, *names)``."""
    ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1), spawn_key=_name_key(names))
    return np.random.Generator(np.random.Philox(ss))


def torch_seed_for(seed, *names):
    """A 63-bit integer suitable for ``torch.manual_seed``."""
    return int(rng_for(seed, "torch", *names).integers(0, 2**63 - 1))
