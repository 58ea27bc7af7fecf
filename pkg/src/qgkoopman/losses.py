"""Loss terms of the composite training objective, each with its analytic gradient.

Field arrays have shape ``(..., C, ny, nx)``; every term averages over all
leading axes.  Spatial derivatives are taken per grid spacing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg as la

__all__ = [
    "LossTerm",
    "LossWeights",
    "gradient_mask",
    "loss_latent",
    "loss_phys",
    "loss_recon_pred",
    "repulsion",
    "sobolev",
    "spectral_log_error",
    "whitening",
]

SPECTRAL_EPS = 1e-12


class LossTerm(NamedTuple):
    value: float
    grad: np.ndarray


@dataclass
class LossWeights:
    """Weights of ``L_recon + w_pred L_pred + w_latent L_latent + w_phys L_phys``.

    ``w_latent`` is a loss weight, unrelated to the planetary vorticity
    gradient of the solver.  The whitening term grows with the squared
    latent amplitude, which for POD latents of normalized 4x64x64 fields is
    of order 1e3, so its default weight is small enough that no term
    dominates at initialization.
    """

    w_pred: float = 1.0
    w_latent: float = 1e-6
    w_phys: float = 0.1
    grad_mask_strength: float = 1.0
    repulsion_scale: float = 1e-4
    repulsion_bandwidth: float = 0.1

    def __post_init__(self):
        for name in ("w_pred", "w_latent", "w_phys", "grad_mask_strength", "repulsion_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.repulsion_bandwidth > 0:
            raise ValueError("repulsion_bandwidth must be positive")


def gradient_mask(truth, strength: float) -> np.ndarray:
    """``1 + strength |grad x| / max |grad x|`` per field, centred periodic differences."""
    truth = np.asarray(truth, dtype=float)
    gx = 0.5 * (np.roll(truth, -1, axis=-1) - np.roll(truth, 1, axis=-1))
    gy = 0.5 * (np.roll(truth, -1, axis=-2) - np.roll(truth, 1, axis=-2))
    mag = np.sqrt(gx**2 + gy**2)
    peak = mag.max(axis=(-2, -1), keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(peak > 0, mag / peak, 0.0)
    return 1.0 + strength * rel


def _masked_mse(pred, truth, mask):
    err = pred - truth
    n = err.size
    return LossTerm(float(np.sum(mask * err**2) / n), 2.0 * mask * err / n)


def loss_recon_pred(decoded, truth, weights: LossWeights) -> tuple[LossTerm, LossTerm]:
    """Gradient-masked MSE of a rollout ``(..., T, C, ny, nx)``.

    Index 0 along the rollout axis is the reconstruction, later indices are
    predictions.  Returns ``(recon, pred)``; each gradient has the full
    rollout shape and is zero outside its own frames.
    """
    decoded = np.asarray(decoded, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if decoded.shape != truth.shape:
        raise ValueError(f"shape mismatch {decoded.shape} vs {truth.shape}")
    mask = gradient_mask(truth, weights.grad_mask_strength)
    rec = _masked_mse(decoded[..., :1, :, :, :], truth[..., :1, :, :, :], mask[..., :1, :, :, :])
    g_rec = np.zeros_like(decoded)
    g_rec[..., :1, :, :, :] = rec.grad
    if decoded.shape[-4] > 1:
        pred = _masked_mse(decoded[..., 1:, :, :, :], truth[..., 1:, :, :, :], mask[..., 1:, :, :, :])
        g_pred = np.zeros_like(decoded)
        g_pred[..., 1:, :, :, :] = pred.grad
        pred = LossTerm(pred.value, g_pred)
    else:
        pred = LossTerm(0.0, np.zeros_like(decoded))
    return LossTerm(rec.value, g_rec), pred


def _deriv_wavenumbers(ny, nx):
    kx = 2.0 * np.pi * np.fft.fftfreq(nx)
    ky = 2.0 * np.pi * np.fft.fftfreq(ny)
    if nx % 2 == 0:
        kx[nx // 2] = 0.0
    if ny % 2 == 0:
        ky[ny // 2] = 0.0
    return kx[None, :], ky[:, None]


def spatial_gradient(x):
    """Spectral ``(d/dx, d/dy)`` per grid spacing, Nyquist mode dropped."""
    ny, nx = x.shape[-2:]
    kx, ky = _deriv_wavenumbers(ny, nx)
    xh = np.fft.fft2(x)
    return np.fft.ifft2(1j * kx * xh).real, np.fft.ifft2(1j * ky * xh).real


def sobolev(decoded, truth) -> LossTerm:
    """MSE between spectral gradients, averaged over both components."""
    err = np.asarray(decoded, dtype=float) - np.asarray(truth, dtype=float)
    ny, nx = err.shape[-2:]
    kx, ky = _deriv_wavenumbers(ny, nx)
    eh = np.fft.fft2(err)
    ex = np.fft.ifft2(1j * kx * eh).real
    ey = np.fft.ifft2(1j * ky * eh).real
    n = 2 * err.size
    value = float((np.sum(ex**2) + np.sum(ey**2)) / n)
    grad = (2.0 / n) * np.fft.ifft2((kx**2 + ky**2) * eh).real
    return LossTerm(value, grad)


def _bins(ny, nx):
    my = np.fft.fftfreq(ny, 1.0 / ny)[:, None]
    mx = np.fft.fftfreq(nx, 1.0 / nx)[None, :]
    idx = np.rint(np.sqrt(mx**2 + my**2)).astype(int)
    nbins = min(nx, ny) // 2 + 1
    idx[idx >= nbins] = -1
    return idx, nbins


def binned_power(xh, ny, nx):
    """Isotropic integer-bin power ``sum |X_k|^2 / M^2`` of spectral fields."""
    idx, nbins = _bins(ny, nx)
    power = np.abs(xh) ** 2 / float(ny * nx) ** 2
    keep = idx >= 0
    flat = power[..., keep]
    onehot = np.zeros((keep.sum(), nbins))
    onehot[np.arange(keep.sum()), idx[keep]] = 1.0
    return flat @ onehot


def spectral_log_error(decoded, truth) -> LossTerm:
    """Mean over bins and fields of the squared log-difference of binned power."""
    decoded = np.asarray(decoded, dtype=float)
    truth = np.asarray(truth, dtype=float)
    ny, nx = decoded.shape[-2:]
    xh = np.fft.fft2(decoded)
    E = binned_power(xh, ny, nx)
    E_true = binned_power(np.fft.fft2(truth), ny, nx)
    diff = np.log(E + SPECTRAL_EPS) - np.log(E_true + SPECTRAL_EPS)
    n = diff.size
    value = float(np.sum(diff**2) / n)
    dE = 2.0 * diff / (E + SPECTRAL_EPS) / n  # (..., nbins)
    idx, _ = _bins(ny, nx)
    w = np.where(idx >= 0, dE[..., np.clip(idx, 0, None)], 0.0)
    grad = (2.0 / (ny * nx)) * np.fft.ifft2(w * xh).real
    return LossTerm(value, grad)


def loss_phys(decoded, truth) -> tuple[LossTerm, LossTerm]:
    """``(sobolev, spectral)`` terms; the physics loss is their sum."""
    if np.shape(decoded) != np.shape(truth):
        raise ValueError("shape mismatch")
    return sobolev(decoded, truth), spectral_log_error(decoded, truth)


def whitening(Z) -> LossTerm:
    """Squared off-diagonal Frobenius norm of the batch covariance over ``d^2``.

    ``Z`` holds one latent vector per row.
    """
    Z = np.asarray(Z, dtype=float)
    n, d = Z.shape
    if n < 2:
        raise ValueError("whitening needs at least two latent vectors")
    Zc = Z - Z.mean(axis=0)
    C = Zc.T @ Zc / (n - 1)
    off = C - np.diag(np.diag(C))
    value = float(np.sum(off**2) / d**2)
    grad = (4.0 / (d**2 * (n - 1))) * Zc @ off
    return LossTerm(value, grad)


def _repulsion_value(eigs, scale, s):
    diff = eigs[:, None] - eigs[None, :]
    kern = np.exp(-np.abs(diff) ** 2 / s**2)
    return scale * 0.5 * (kern.sum() - eigs.size)


def repulsion(K, scale: float, bandwidth: float, degeneracy_tol: float = 1e-6) -> LossTerm:
    """Gaussian eigenvalue repulsion ``scale * sum_{i<j} exp(-|l_i - l_j|^2 / s^2)``.

    The gradient with respect to ``K`` uses first-order eigenvalue
    perturbation; near-degenerate spectra fall back to central differences.
    """
    K = np.asarray(K, dtype=float)
    d = K.shape[0]
    if scale == 0:
        return LossTerm(0.0, np.zeros_like(K))
    lam, Y, X = la.eig(K, left=True, right=True)
    value = float(_repulsion_value(lam, scale, bandwidth))
    diff = lam[:, None] - lam[None, :]
    gaps = np.abs(diff)
    np.fill_diagonal(gaps, np.inf)
    c = np.einsum("ij,ij->j", Y.conj(), X)
    if d > 1 and (gaps.min() < degeneracy_tol or np.min(np.abs(c)) < degeneracy_tol):
        return LossTerm(value, _repulsion_fd(K, scale, bandwidth))
    kern = np.exp(-np.abs(diff) ** 2 / bandwidth**2)
    g = scale * np.sum(kern * (-2.0 * diff / bandwidth**2), axis=1)
    M = (Y.conj() * (g.conj() / c)[None, :]) @ X.T
    return LossTerm(value, M.real)


def _repulsion_fd(K, scale, s, h=1e-6):
    G = np.zeros_like(K)
    for idx in np.ndindex(K.shape):
        Kp = K.copy()
        Kp[idx] += h
        Km = K.copy()
        Km[idx] -= h
        fp = _repulsion_value(np.linalg.eigvals(Kp), scale, s)
        fm = _repulsion_value(np.linalg.eigvals(Km), scale, s)
        G[idx] = (fp - fm).real / (2 * h)
    return G


def loss_latent(latent_batch, K, weights: LossWeights):
    """Whitening plus repulsion; returns ``(value, grad_batch, grad_W, grad_D, parts)``."""
    w = whitening(latent_batch)
    r = repulsion(K, weights.repulsion_scale, weights.repulsion_bandwidth)
    gW, gD = k_grad_to_wd(r.grad)
    return w.value + r.value, w.grad, gW, gD, {"whitening": w.value, "repulsion": r.value}


def k_grad_to_wd(GK):
    """Chain rule through ``K = (W - W^T)/2 + (D + D^T)/2``."""
    return 0.5 * (GK - GK.T), 0.5 * (GK + GK.T)
