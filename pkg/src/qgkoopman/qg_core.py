"""Pseudo-spectral two-layer quasi-geostrophic solver on a doubly periodic domain.

The prognostic variable is the potential-vorticity anomaly ``q`` of each layer;
the streamfunction ``psi`` is always re-derived from it by the elliptic PV
inversion.  Spectral fields use the real-to-complex layout of
:func:`scipy.fft.rfft2` over the last two axes, shape ``(2, ny, nx // 2 + 1)``.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import time
from dataclasses import dataclass
from typing import Callable, MutableSequence

import numpy as np
import scipy.fft as sfft

__all__ = [
    "BlowUpError",
    "QGParams",
    "QGState",
    "SpectralGrid",
    "VelocityField",
    "compute_velocity",
    "dealias_mask",
    "enstrophy_layers",
    "forward_pv",
    "generate_dataset",
    "get_grid",
    "initial_state",
    "integrate",
    "invert_pv",
    "ssd_filter",
    "step",
    "tendency",
    "total_energy",
    "truncate_spectral",
]

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400.0


class BlowUpError(FloatingPointError):
    """Raised when the solver state stops being finite."""

    def __init__(self, step_index: int, message: str | None = None):
        self.step_index = step_index
        super().__init__(message or f"non-finite PV encountered at step {step_index}")


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class QGParams:
    """Physical and numerical constants of the two-layer model.

    ``kd2`` is the squared deformation wavenumber and ``delta = H1 / H2``.  The
    coupling coefficients ``F1``, ``F2`` are derived from them; when passed
    explicitly they must agree exactly.  Setting ``ssd_strength = 0`` disables
    the small-scale filter.
    """

    nx: int = 64
    ny: int = 64
    L: float = 1.0e6
    dt: float = 3600.0
    beta: float = 1.5e-11
    r_ek: float = 5.787e-7
    U1: float = 0.025
    U2: float = 0.0
    H1: float = 500.0
    H2: float = 2000.0
    delta: float = 0.25
    kd2: float = 15000.0**-2
    F1: float | None = None
    F2: float | None = None
    ssd_cutoff_frac: float = 0.65
    ssd_strength: float = 23.6
    ssd_order: float = 4.0

    def __post_init__(self):
        if not (_is_pow2(self.nx) and _is_pow2(self.ny)):
            raise ValueError(f"grid sizes must be powers of two, got {self.nx}x{self.ny}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.r_ek < 0:
            raise ValueError("r_ek must be non-negative")
        if self.H1 <= 0 or self.H2 <= 0 or self.L <= 0:
            raise ValueError("layer depths and domain size must be positive")
        if self.kd2 < 0 or self.delta < 0:
            raise ValueError("kd2 and delta must be non-negative")
        F1 = self.kd2 / (1.0 + self.delta)
        F2 = self.delta * F1
        if self.F1 is not None and self.F1 != F1:
            raise ValueError(f"F1={self.F1} inconsistent with kd2/(1+delta)={F1}")
        if self.F2 is not None and self.F2 != F2:
            raise ValueError(f"F2={self.F2} inconsistent with delta*F1={F2}")
        object.__setattr__(self, "F1", F1)
        object.__setattr__(self, "F2", F2)

    @property
    def H(self) -> float:
        return self.H1 + self.H2

    @property
    def shear_pv_gradient(self) -> tuple[float, float]:
        """Background PV gradient from vertical shear, excluding beta."""
        dU = self.U1 - self.U2
        return self.F1 * dU, -self.F2 * dU

    def replace(self, **changes) -> "QGParams":
        changes.setdefault("F1", None)
        changes.setdefault("F2", None)
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        del d["F1"], d["F2"]
        return d


@dataclass(frozen=True, eq=False)
class SpectralGrid:
    """Wavenumber arrays for the rfft2 layout, in rad/m."""

    kx: np.ndarray  # (1, nx//2+1)
    ky: np.ndarray  # (ny, 1)
    k2: np.ndarray  # (ny, nx//2+1)
    kx_deriv: np.ndarray  # kx with the Nyquist column zeroed, for odd derivatives
    ky_deriv: np.ndarray
    k_nyq: float
    dealias: np.ndarray  # bool (ny, nx//2+1)
    ssd: np.ndarray  # filter factors (ny, nx//2+1)
    inv: tuple  # (a11, a12, a21, a22) of the inverse 2x2 PV-inversion block


def dealias_mask(nx: int, ny: int) -> np.ndarray:
    """Two-thirds rule: keep integer wavenumbers with ``|m| <= n // 3`` on each axis."""
    mx = np.fft.rfftfreq(nx, 1.0 / nx)
    my = np.fft.fftfreq(ny, 1.0 / ny)
    return (np.abs(my)[:, None] <= ny // 3) & (np.abs(mx)[None, :] <= nx // 3)


@functools.lru_cache(maxsize=32)
def get_grid(params: QGParams) -> SpectralGrid:
    nx, ny, L = params.nx, params.ny, params.L
    dk = 2.0 * np.pi / L
    kx = dk * np.fft.rfftfreq(nx, 1.0 / nx)[None, :]
    ky = dk * np.fft.fftfreq(ny, 1.0 / ny)[:, None]
    k2 = kx**2 + ky**2
    kx_d = kx.copy()
    kx_d[:, -1] = 0.0
    ky_d = ky.copy()
    ky_d[ny // 2, :] = 0.0
    k_nyq = dk * min(nx, ny) / 2.0

    frac = np.sqrt(k2) / k_nyq
    excess = np.clip(frac - params.ssd_cutoff_frac, 0.0, None)
    ssd = np.exp(-params.ssd_strength * excess**params.ssd_order)
    ssd = np.where(frac > params.ssd_cutoff_frac, ssd, 1.0)

    F1, F2 = params.F1, params.F2
    det = k2 * (k2 + F1 + F2)
    with np.errstate(divide="ignore", invalid="ignore"):
        rdet = np.where(det > 0, 1.0 / det, 0.0)
    a11 = -(k2 + F2) * rdet
    a12 = -F1 * rdet
    a21 = -F2 * rdet
    a22 = -(k2 + F1) * rdet
    for a in (a11, a12, a21, a22):
        a[0, 0] = 0.0

    return SpectralGrid(
        kx=kx, ky=ky, k2=k2, kx_deriv=kx_d, ky_deriv=ky_d, k_nyq=k_nyq,
        dealias=dealias_mask(nx, ny), ssd=ssd, inv=(a11, a12, a21, a22),
    )


def _fwd(x):
    return sfft.rfft2(x, axes=(-2, -1))


def _inv(xh, shape):
    return sfft.irfft2(xh, s=shape, axes=(-2, -1))


@dataclass
class QGState:
    """Layer PV and streamfunction with their spectral mirrors.

    Build through :meth:`from_q` or :meth:`from_q_hat`; ``psi`` is never set
    independently of ``q``.
    """

    q: np.ndarray
    psi: np.ndarray
    q_hat: np.ndarray
    psi_hat: np.ndarray
    t: float = 0.0

    @classmethod
    def from_q_hat(cls, q_hat, params: QGParams, t: float = 0.0) -> "QGState":
        q_hat = np.array(q_hat, dtype=complex)
        q_hat[..., 0, 0] = 0.0
        shape = (params.ny, params.nx)
        psi_hat = invert_pv(q_hat, params)
        return cls(q=_inv(q_hat, shape), psi=_inv(psi_hat, shape),
                   q_hat=q_hat, psi_hat=psi_hat, t=float(t))

    @classmethod
    def from_q(cls, q, params: QGParams, t: float = 0.0) -> "QGState":
        q = np.asarray(q, dtype=float)
        if q.shape != (2, params.ny, params.nx):
            raise ValueError(f"q must have shape (2, {params.ny}, {params.nx}), got {q.shape}")
        return cls.from_q_hat(_fwd(q), params, t)


@dataclass
class VelocityField:
    u: np.ndarray
    v: np.ndarray


def forward_pv(psi_hat, params: QGParams) -> np.ndarray:
    """PV from streamfunction: ``q_m = lap(psi_m) + F_m (psi_other - psi_m)``."""
    g = get_grid(params)
    p1, p2 = psi_hat[0], psi_hat[1]
    q1 = -g.k2 * p1 + params.F1 * (p2 - p1)
    q2 = -g.k2 * p2 + params.F2 * (p1 - p2)
    return np.stack([q1, q2])


def invert_pv(q_hat, params: QGParams) -> np.ndarray:
    """Solve the per-wavevector 2x2 system for the streamfunction.

    The ``(0, 0)`` mode of the result is zero.
    """
    a11, a12, a21, a22 = get_grid(params).inv
    q1, q2 = q_hat[0], q_hat[1]
    return np.stack([a11 * q1 + a12 * q2, a21 * q1 + a22 * q2])


def compute_velocity(psi_hat, params: QGParams) -> VelocityField:
    """``u = -d(psi)/dy``, ``v = d(psi)/dx`` by spectral differentiation."""
    g = get_grid(params)
    shape = (params.ny, params.nx)
    u = _inv(-1j * g.ky_deriv * psi_hat, shape)
    v = _inv(1j * g.kx_deriv * psi_hat, shape)
    return VelocityField(u=u, v=v)


def _jacobian_hat(psi_hat, q_hat, params: QGParams) -> np.ndarray:
    # flux form d(uq)/dx + d(vq)/dy, equal to J(psi, q) for non-divergent u
    g = get_grid(params)
    shape = (params.ny, params.nx)
    m = g.dealias
    ph = psi_hat * m
    qh = q_hat * m
    u = _inv(-1j * g.ky * ph, shape)
    v = _inv(1j * g.kx * ph, shape)
    q = _inv(qh, shape)
    jh = 1j * g.kx * _fwd(u * q) + 1j * g.ky * _fwd(v * q)
    return jh * m


def tendency(state: QGState, params: QGParams) -> np.ndarray:
    """Spectral PV tendency of both layers, without the small-scale filter."""
    g = get_grid(params)
    ph, qh = state.psi_hat, state.q_hat
    dqh = -_jacobian_hat(ph, qh, params)
    qy1, qy2 = params.shear_pv_gradient
    qy = np.array([params.beta + qy1, params.beta + qy2])[:, None, None]
    U = np.array([params.U1, params.U2])[:, None, None]
    # Nyquist column dropped so the tendency stays the transform of a real field
    dqh -= 1j * g.kx_deriv * qy * ph
    dqh -= 1j * g.kx_deriv * U * qh
    dqh[1] += params.r_ek * g.k2 * ph[1]
    dqh[..., 0, 0] = 0.0
    return dqh


def ssd_filter(q_hat, params: QGParams) -> np.ndarray:
    """Exponential damping of wavenumbers above ``ssd_cutoff_frac`` of Nyquist."""
    return q_hat * get_grid(params).ssd


def step(state: QGState, params: QGParams, history: MutableSequence) -> QGState:
    """Advance one ``dt`` with AB3 (Euler, then AB2 while history fills).

    ``history`` holds the previous tendencies, most recent last, and is
    updated in place; pass an empty list to start a run.
    """
    f0 = tendency(state, params)
    dt = params.dt
    if len(history) == 0:
        incr = dt * f0
    elif len(history) == 1:
        incr = dt * (1.5 * f0 - 0.5 * history[-1])
    else:
        incr = dt / 12.0 * (23.0 * f0 - 16.0 * history[-1] + 5.0 * history[-2])
    q_hat = ssd_filter(state.q_hat + incr, params)
    history.append(f0)
    if len(history) > 2:
        del history[0]
    if not np.all(np.isfinite(q_hat)):
        raise BlowUpError(int(round(state.t / dt)) + 1)
    return QGState.from_q_hat(q_hat, params, state.t + dt)


def integrate(state: QGState, params: QGParams, n_steps: int,
              history: MutableSequence | None = None,
              callback: Callable[[int, QGState], None] | None = None) -> QGState:
    history = [] if history is None else history
    for i in range(n_steps):
        state = step(state, params, history)
        if callback is not None:
            callback(i + 1, state)
    return state


def initial_state(params: QGParams, seed: int, amplitude: float = 1e-7) -> QGState:
    """Small large-scale PV noise in both layers (``|k|`` below a quarter of Nyquist)."""
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-1.0, 1.0, size=(2, params.ny, params.nx))
    g = get_grid(params)
    nh = _fwd(noise) * (np.sqrt(g.k2) < 0.25 * g.k_nyq)
    nh[..., 0, 0] = 0.0
    q = _inv(nh, (params.ny, params.nx))
    q *= amplitude / np.abs(q).max()
    return QGState.from_q(q, params)


def total_energy(state: QGState, params: QGParams) -> float:
    """Depth-weighted domain-mean energy ``-1/2 <sum_m (H_m/H) psi_m q_m>``."""
    w = np.array([params.H1, params.H2]) / params.H
    return float(-0.5 * np.sum(w * np.mean(state.psi * state.q, axis=(-2, -1))))


def enstrophy_layers(q) -> np.ndarray:
    """``1/2 <q_m^2>`` for each layer (or channel) of a real field."""
    return 0.5 * np.mean(np.asarray(q) ** 2, axis=(-2, -1))


def truncate_spectral(field, n_out: int) -> np.ndarray:
    """Spectrally truncate a real periodic field ``(..., n, n)`` to ``n_out``.

    Wavenumbers ``|m| >= n_out / 2`` are dropped, so the output carries no
    Nyquist content.  Values keep their amplitude (not their sum).
    """
    field = np.asarray(field, dtype=float)
    ny, nx = field.shape[-2:]
    if n_out > min(nx, ny):
        raise ValueError(f"output resolution {n_out} exceeds simulation resolution {nx}x{ny}")
    if n_out == nx == ny:
        return field.copy()
    fh = _fwd(field)
    h = n_out // 2
    out = np.zeros(field.shape[:-2] + (n_out, h + 1), dtype=complex)
    out[..., :h, :h] = fh[..., :h, :h]
    out[..., n_out - h + 1:, :h] = fh[..., ny - h + 1:, :h]
    return _inv(out, (n_out, n_out)) * (n_out * n_out) / (nx * ny)


def generate_dataset(params: QGParams, spinup_days: float, run_days: float,
                     subsample: int = 5, out_resolution: int | None = None,
                     seed: int = 0, path=None, progress: bool = False, stats=None):
    """Integrate the model and record normalized snapshots.

    Returns ``(snapshots, stats)`` where ``snapshots`` has shape
    ``(n, 4, r, r)`` with channels ``(q1, q2, psi1, psi2)``, normalized per
    channel by the recorded mean and standard deviation.  When ``path`` is
    given the dataset is also written in the ``QGK1`` container.  Passing
    ``stats`` normalizes with those statistics instead (for test
    trajectories that must share the training normalization).
    """
    from .formats import write_dataset
    from .latent_space import NormalizationStats

    if subsample < 1:
        raise ValueError("subsample must be >= 1")
    r = params.nx if out_resolution is None else int(out_resolution)
    if r > min(params.nx, params.ny):
        raise ValueError(f"out_resolution {r} exceeds simulation grid {params.nx}")
    if not _is_pow2(r):
        raise ValueError("out_resolution must be a power of two")
    n_spin = int(round(spinup_days * SECONDS_PER_DAY / params.dt))
    n_run = int(round(run_days * SECONDS_PER_DAY / params.dt))
    n_snap = n_run // subsample
    if n_snap < 1:
        raise ValueError(f"run_days={run_days} yields no snapshot at subsample={subsample}")

    t0 = time.perf_counter()
    state = initial_state(params, seed)
    history: list = []
    state = integrate(state, params, n_spin, history)
    logger.info("spin-up of %d steps done in %.1fs", n_spin, time.perf_counter() - t0)

    raw = np.empty((n_snap, 4, r, r))
    for i in range(n_snap):
        state = integrate(state, params, subsample, history)
        raw[i, :2] = truncate_spectral(state.q, r)
        raw[i, 2:] = truncate_spectral(state.psi, r)
        if progress and (i + 1) % max(1, n_snap // 10) == 0:
            logger.info("recorded %d/%d snapshots", i + 1, n_snap)

    if stats is None:
        stats = NormalizationStats(mean=raw.mean(axis=(0, 2, 3)), std=raw.std(axis=(0, 2, 3)))
    snaps = stats.normalize(raw)
    if path is not None:
        write_dataset(path, snaps, stats, dt_snapshot=params.dt * subsample)
    return snaps, stats
