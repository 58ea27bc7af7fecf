"""Binary containers for datasets, POD bases and operators.

All integers are little-endian ``u32`` and all floats little-endian IEEE.

* ``QGK1`` dataset: version, n_snapshots, n_channels, ny, nx, then
  ``dt_snapshot_seconds`` (f64), per-channel ``(mean, std)`` f64 pairs and the
  row-major f32 snapshot payload.
* ``QGKB`` basis: d, N, C, ny, nx, then f64 singular values, f64
  ``(mean, std)`` pairs and f64 row-major modes.
* ``QGKO`` operator: d, then f64 row-major ``W`` and ``D``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .latent_space import NormalizationStats, PODBasis

__all__ = [
    "Dataset",
    "FormatError",
    "read_basis",
    "read_dataset",
    "read_operator",
    "write_basis",
    "write_dataset",
    "write_operator",
]

DATASET_MAGIC = b"QGK1"
BASIS_MAGIC = b"QGKB"
OPERATOR_MAGIC = b"QGKO"
DATASET_VERSION = 1


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    snapshots: np.ndarray  # (n, C, ny, nx), normalized
    stats: NormalizationStats
    dt_snapshot: float  # seconds

    @property
    def shape(self) -> tuple:
        return self.snapshots.shape


def _stats_bytes(stats: NormalizationStats) -> bytes:
    return np.column_stack([stats.mean, stats.std]).astype("<f8").tobytes()


def _read_stats(buf, offset, n_ch):
    pairs = np.frombuffer(buf, "<f8", 2 * n_ch, offset).reshape(n_ch, 2)
    return NormalizationStats(pairs[:, 0].copy(), pairs[:, 1].copy()), offset + 16 * n_ch


def write_dataset(path, snapshots, stats: NormalizationStats, dt_snapshot: float) -> None:
    snapshots = np.asarray(snapshots)
    if snapshots.ndim != 4:
        raise ValueError("snapshots must have shape (n, C, ny, nx)")
    n, c, ny, nx = snapshots.shape
    if c != stats.n_channels:
        raise ValueError("channel count does not match normalization stats")
    head = DATASET_MAGIC + struct.pack("<5Id", DATASET_VERSION, n, c, ny, nx, float(dt_snapshot))
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(_stats_bytes(stats))
        fh.write(np.ascontiguousarray(snapshots, dtype="<f4").tobytes())


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a QGK1 dataset")
    version, n, c, ny, nx, dt = struct.unpack_from("<5Id", buf, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    stats, off = _read_stats(buf, 4 + 28, c)
    count = n * c * ny * nx
    if len(buf) != off + 4 * count:
        raise FormatError(f"{path}: payload size mismatch")
    snaps = np.frombuffer(buf, "<f4", count, off).reshape(n, c, ny, nx).astype(float)
    return Dataset(snaps, stats, dt)


def write_basis(path, basis: PODBasis) -> None:
    c, ny, nx = basis.shape
    with open(path, "wb") as fh:
        fh.write(BASIS_MAGIC + struct.pack("<5I", basis.d, basis.N, c, ny, nx))
        fh.write(np.asarray(basis.singular_values, dtype="<f8").tobytes())
        fh.write(_stats_bytes(basis.stats))
        fh.write(np.ascontiguousarray(basis.modes, dtype="<f8").tobytes())


def read_basis(path) -> PODBasis:
    buf = Path(path).read_bytes()
    if buf[:4] != BASIS_MAGIC:
        raise FormatError(f"{path}: not a QGKB basis")
    d, N, c, ny, nx = struct.unpack_from("<5I", buf, 4)
    if N != c * ny * nx:
        raise FormatError(f"{path}: inconsistent header")
    off = 24
    sv = np.frombuffer(buf, "<f8", d, off).copy()
    stats, off = _read_stats(buf, off + 8 * d, c)
    if len(buf) != off + 8 * d * N:
        raise FormatError(f"{path}: payload size mismatch")
    modes = np.frombuffer(buf, "<f8", d * N, off).reshape(d, N).copy()
    return PODBasis(modes, sv, stats, (c, ny, nx))


def write_operator(path, W, D) -> None:
    W = np.asarray(W, dtype="<f8")
    D = np.asarray(D, dtype="<f8")
    if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape != D.shape:
        raise ValueError("W and D must be square matrices of equal shape")
    with open(path, "wb") as fh:
        fh.write(OPERATOR_MAGIC + struct.pack("<I", W.shape[0]))
        fh.write(np.ascontiguousarray(W).tobytes())
        fh.write(np.ascontiguousarray(D).tobytes())


def read_operator(path):
    """Return ``(W, D)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != OPERATOR_MAGIC:
        raise FormatError(f"{path}: not a QGKO operator")
    (d,) = struct.unpack_from("<I", buf, 4)
    if len(buf) != 8 + 16 * d * d:
        raise FormatError(f"{path}: payload size mismatch")
    W = np.frombuffer(buf, "<f8", d * d, 8).reshape(d, d).copy()
    D = np.frombuffer(buf, "<f8", d * d, 8 + 8 * d * d).reshape(d, d).copy()
    return W, D
