"""Affine scaling between physical units and the normalized [-1, 1] range.

All learned quantities (observed states, inputs, outputs) live in scaled
units; the storage holdup is deliberately left unscaled.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def check_vector(x, n: int, name: str = "x") -> np.ndarray:
    """Validate a finite 1-D float vector of length ``n`` and return it."""
    arr = np.asarray(x, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"{name}: expected shape ({n},), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite entries")
    return arr


def check_matrix(x, shape: tuple[int, int], name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite entries")
    return arr


@dataclass(frozen=True)
class BoxScaler:
    """Maps a box [lo, hi] onto [-1, 1] per component (first axis)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo/hi must be 1-D arrays of equal length")
        if np.any(hi <= lo):
            raise ValueError("every upper bound must exceed its lower bound")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n(self) -> int:
        return self.lo.shape[0]

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def _bcast(self, v: np.ndarray, ndim: int) -> np.ndarray:
        return v.reshape((self.n,) + (1,) * (ndim - 1))

    def scale(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x - self._bcast(self.mid, x.ndim)) / self._bcast(self.half, x.ndim)

    def unscale(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self._bcast(self.mid, x.ndim) + x * self._bcast(self.half, x.ndim)

    def clip_physical(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.clip(x, self._bcast(self.lo, x.ndim), self._bcast(self.hi, x.ndim))


@dataclass(frozen=True)
class PlantScaler:
    """Scaling set for one plant: observed states, inputs and outputs.

    The first ``n_pred`` observed channels are the path-constrained ones;
    their boxes double as the constraint bounds in the OCP.
    """

    x_obs: BoxScaler
    u: BoxScaler
    y: BoxScaler
    n_pred: int = 3

    def __post_init__(self):
        if not 0 < self.n_pred <= self.x_obs.n:
            raise ValueError("n_pred must index into the observed channels")

    @property
    def x_pred(self) -> BoxScaler:
        return BoxScaler(self.x_obs.lo[: self.n_pred], self.x_obs.hi[: self.n_pred])
