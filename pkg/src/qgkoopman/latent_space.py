"""Linear POD encoder/decoder with dual-stream (present + history) encoding.

States are arrays of shape ``(C, ny, nx)`` in normalized units and are
flattened channel-major, then row-major in space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

__all__ = [
    "LatentState",
    "NormalizationStats",
    "PODBasis",
    "decode",
    "encode",
    "encode_pairs",
    "energy_fraction",
    "fit_pod",
]


@dataclass
class NormalizationStats:
    """Per-channel mean and standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.std = np.asarray(self.std, dtype=float).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std must have one entry per channel")
        if np.any(~(self.std > 0)):
            raise ValueError("std must be positive in every channel")

    @property
    def n_channels(self) -> int:
        return self.mean.size

    def _bcast(self, x, arr):
        # channel axis is the third from the end
        return arr.reshape((-1,) + (1,) * 2) if np.ndim(x) >= 3 else arr

    def normalize(self, x):
        x = np.asarray(x, dtype=float)
        return (x - self._bcast(x, self.mean)) / self._bcast(x, self.std)

    def denormalize(self, x):
        x = np.asarray(x, dtype=float)
        return x * self._bcast(x, self.std) + self._bcast(x, self.mean)


@dataclass
class LatentState:
    z: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        if not np.all(np.isfinite(self.z)):
            raise FloatingPointError("latent state has non-finite entries")


@dataclass
class PODBasis:
    """Orthonormal rows ``modes`` (d, N) with singular values and grid metadata."""

    modes: np.ndarray
    singular_values: np.ndarray
    stats: NormalizationStats
    shape: tuple  # (C, ny, nx)

    @property
    def d(self) -> int:
        return self.modes.shape[0]

    @property
    def N(self) -> int:
        return self.modes.shape[1]

    def truncate(self, d: int) -> "PODBasis":
        if not 1 <= d <= self.d:
            raise ValueError(f"cannot truncate a {self.d}-mode basis to {d}")
        return PODBasis(self.modes[:d].copy(), self.singular_values[:d].copy(),
                        self.stats, self.shape)

    def _flat(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-3:] != tuple(self.shape):
            raise ValueError(f"state shape {x.shape[-3:]} does not match basis grid {self.shape}")
        return x.reshape(x.shape[:-3] + (self.N,))


def fit_pod(snapshots, d: int, stats: NormalizationStats | None = None) -> PODBasis:
    """Top-``d`` POD modes of normalized snapshots ``(n, C, ny, nx)``.

    No further centering is applied: the data are expected to be normalized
    already, so the stored channel means are zero in normalized units.
    """
    snapshots = np.asarray(snapshots, dtype=float)
    n = snapshots.shape[0]
    shape = snapshots.shape[1:]
    X = snapshots.reshape(n, -1)
    if d < 1 or d > min(X.shape):
        raise ValueError(f"latent dimension {d} exceeds snapshot count {n} or state size {X.shape[1]}")
    _, s, vt = la.svd(X, full_matrices=False, lapack_driver="gesdd")
    if stats is None:
        C = shape[0]
        stats = NormalizationStats(np.zeros(C), np.ones(C))
    return PODBasis(modes=np.ascontiguousarray(vt[:d]), singular_values=s[:d].copy(),
                    stats=stats, shape=tuple(shape))


def energy_fraction(basis: PODBasis, snapshots) -> float:
    """Share of the snapshot energy captured by the basis."""
    X = np.asarray(snapshots, dtype=float).reshape(len(snapshots), -1)
    return float(np.sum(basis.singular_values**2) / np.sum(X**2))


def encode(basis: PODBasis, x_t, x_prev=None, t: float = 0.0) -> LatentState:
    """``z = (P x_t + P x_prev) / 2``; without history ``z = P x_t``."""
    zt = basis.modes @ basis._flat(x_t)
    if x_prev is None:
        return LatentState(zt, t)
    return LatentState(0.5 * (zt + basis.modes @ basis._flat(x_prev)), t)


def encode_pairs(basis: PODBasis, x_t, x_prev) -> np.ndarray:
    """Batched dual-stream encoding; inputs ``(B, C, ny, nx)``, output ``(B, d)``."""
    xt = basis._flat(x_t)
    xp = basis._flat(x_prev)
    return 0.5 * (xt + xp) @ basis.modes.T


def decode(basis: PODBasis, z) -> np.ndarray:
    """Reconstruct normalized fields; ``z`` may be ``(d,)`` or ``(B, d)``."""
    z = np.asarray(getattr(z, "z", z), dtype=float)
    if z.shape[-1] != basis.d:
        raise ValueError(f"latent length {z.shape[-1]} does not match basis dimension {basis.d}")
    return (z @ basis.modes).reshape(z.shape[:-1] + tuple(basis.shape))
