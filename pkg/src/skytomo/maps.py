"""Per-column 2.5D cloud properties."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class CloudMaps2p5D:
    """LWP (kg m^-2), cloud base height and thickness (m), occupancy per column.

    Clear columns carry the sentinel CBH = dH = 0 (and LWP = 0 for ground truth);
    ``occupancy`` is the validity channel.
    """

    lwp: np.ndarray
    cbh: np.ndarray
    dh: np.ndarray
    occupancy: np.ndarray

    def __post_init__(self):
        shape = np.shape(self.lwp)
        for name in ("cbh", "dh", "occupancy"):
            if np.shape(getattr(self, name)) != shape:
                raise InputError(f"map '{name}' shape {np.shape(getattr(self, name))} != {shape}")
        object.__setattr__(self, "occupancy", np.asarray(self.occupancy, dtype=bool))
        if np.any(np.asarray(self.lwp) < 0):
            raise InputError("LWP must be non-negative")

    @property
    def shape(self):
        return np.shape(self.lwp)

    @property
    def cth(self):
        return np.where(self.occupancy, self.cbh + self.dh, 0.0)

    @classmethod
    def empty(cls, shape):
        z = np.zeros(shape)
        return cls(z, z.copy(), z.copy(), np.zeros(shape, dtype=bool))
