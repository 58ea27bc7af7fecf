"""Fitting the latent operator: CT-DMD initialization, then gradient refinement.

Only ``(W, D)`` are trained; the POD encoder/decoder stays frozen.  Gradients
are accumulated in reverse through the unrolled RK4 stages and the linear
decoder.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as la

from .koopman import KoopmanOperator, assemble, spectrum, stabilize
from .latent_space import PODBasis, encode_pairs
from .losses import LossWeights, k_grad_to_wd, loss_latent, loss_phys, loss_recon_pred

__all__ = [
    "AdamW",
    "TrainConfig",
    "TrainingDivergedError",
    "encode_trajectory",
    "fit_ctdmd",
    "objective",
    "split_train_val",
    "train",
]

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainingDivergedError(FloatingPointError):
    def __init__(self, batch_index: int, value: float):
        self.batch_index = batch_index
        super().__init__(f"loss {value!r} at batch {batch_index}")


@dataclass
class TrainConfig:
    rollout_len: int = 10
    batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 1e-5
    epochs: int = 2
    seed: int = 0
    stabilize_margin: float | None = None
    rk4_substeps: int = 1
    ridge: float = 0.0
    eval_segments: int = 256
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.rollout_len < 2:
            raise ValueError("rollout_len must be at least 2")
        if self.batch_size < 1 or self.epochs < 0 or self.rk4_substeps < 1:
            raise ValueError("batch_size and rk4_substeps must be positive, epochs non-negative")
        if self.stabilize_margin is not None and self.stabilize_margin < 0:
            raise ValueError("stabilize_margin must be non-negative")


def split_train_val(n: int, val_fraction: float = 0.1) -> int:
    """Index of the single temporal cut; the tail after it is validation."""
    return n - int(round(n * val_fraction))


def encode_trajectory(basis: PODBasis, snapshots) -> np.ndarray:
    """Dual-stream latents ``z_t`` for ``t = 1..n-1``, shape ``(n - 1, d)``."""
    snapshots = np.asarray(snapshots, dtype=float)
    return encode_pairs(basis, snapshots[1:], snapshots[:-1])


def _one_step_operator(trajs, ridge):
    X = np.concatenate([t[:-1] for t in trajs])
    Y = np.concatenate([t[1:] for t in trajs])
    d = X.shape[1]
    if ridge > 0:
        X = np.vstack([X, np.sqrt(ridge) * np.eye(d)])
        Y = np.vstack([Y, np.zeros((d, d))])
    At, *_ = la.lstsq(X, Y, lapack_driver="gelsd")
    return At.T


def _fd_generator(trajs, dt, ridge):
    Z = np.concatenate([t[1:-1] for t in trajs])
    Zdot = np.concatenate([(t[2:] - t[:-2]) / (2.0 * dt) for t in trajs])
    d = Z.shape[1]
    if ridge > 0:
        Z = np.vstack([Z, np.sqrt(ridge) * np.eye(d)])
        Zdot = np.vstack([Zdot, np.zeros((d, d))])
    Kt, *_ = la.lstsq(Z, Zdot, lapack_driver="gelsd")
    return Kt.T


def fit_ctdmd(latent_trajectories, dt: float = 1.0, ridge: float = 0.0,
              cond_limit: float = 1e10, max_ridge_tries: int = 8):
    """Continuous-time DMD: ``K0 = log(A) / dt`` of the ridge one-step operator.

    ``latent_trajectories`` is one ``(T, d)`` array or a list of them.
    Returns ``(W, D)`` with ``W = D = K0`` so that ``assemble(W, D) == K0``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    trajs = [np.asarray(latent_trajectories, dtype=float)] \
        if np.ndim(latent_trajectories) == 2 else [np.asarray(t, dtype=float) for t in latent_trajectories]
    d = trajs[0].shape[1]
    n_pairs = sum(len(t) - 1 for t in trajs)
    if n_pairs < d + 1:
        raise ValueError(f"need at least {d + 1} snapshot pairs, got {n_pairs}")

    scale = max(np.mean([np.sum(t**2) / len(t) for t in trajs]), 1e-300)
    for attempt in range(max_ridge_tries + 1):
        A = _one_step_operator(trajs, ridge)
        lam, V = la.eig(A)
        if np.linalg.cond(V) > cond_limit:
            warnings.warn("one-step operator is not diagonalizable within tolerance; "
                          "using finite-difference regression", RuntimeWarning, stacklevel=2)
            K0 = _fd_generator(trajs, dt, ridge)
            return K0.copy(), K0.copy()
        on_cut = (np.abs(lam.imag) <= 1e-12 * max(1.0, np.abs(lam).max())) & (lam.real <= 0)
        if not on_cut.any():
            break
        new_ridge = max(10.0 * ridge, 1e-10 * scale)
        warnings.warn(f"{on_cut.sum()} eigenvalue(s) of the one-step operator on the log "
                      f"branch cut; ridge {ridge:g} -> {new_ridge:g}", RuntimeWarning, stacklevel=2)
        ridge = new_ridge
    else:
        warnings.warn("branch-cut eigenvalues persist; using finite-difference regression",
                      RuntimeWarning, stacklevel=2)
        K0 = _fd_generator(trajs, dt, ridge)
        return K0.copy(), K0.copy()

    K0 = (V * np.log(lam.astype(complex))[None, :]) @ la.inv(V)
    K0 = K0.real / dt
    return K0.copy(), K0.copy()


class AdamW:
    """Adaptive moments with decoupled weight decay, on a list of arrays in place."""

    def __init__(self, params, lr=2e-4, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _rollout(K, Z0, n_frames, n_sub):
    """Latents for every frame plus the stage inputs needed in reverse."""
    h = 1.0 / n_sub
    Zs = [Z0]
    tape = []
    Z = Z0
    for _ in range(n_frames - 1):
        for _ in range(n_sub):
            k1 = K @ Z
            u2 = Z + 0.5 * h * k1
            k2 = K @ u2
            u3 = Z + 0.5 * h * k2
            k3 = K @ u3
            u4 = Z + h * k3
            k4 = K @ u4
            tape.append((Z, u2, u3, u4))
            Z = Z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        Zs.append(Z)
    return Zs, tape


def _rk4_backward(K, a, stages, h, GK):
    """Adjoint of one RK4 step; accumulates into ``GK`` and returns the input adjoint."""
    z, u2, u3, u4 = stages
    a1 = (h / 6.0) * a
    a2 = (h / 3.0) * a
    a3 = (h / 3.0) * a
    a4 = (h / 6.0) * a
    az = a.copy()
    GK += a4 @ u4.T
    au = K.T @ a4
    az += au
    a3 = a3 + h * au
    GK += a3 @ u3.T
    au = K.T @ a3
    az += au
    a2 = a2 + 0.5 * h * au
    GK += a2 @ u2.T
    au = K.T @ a2
    az += au
    a1 = a1 + 0.5 * h * au
    GK += a1 @ z.T
    az += K.T @ a1
    return az


def objective(W, D, basis: PODBasis, x_prev, segments, weights: LossWeights,
              n_sub: int = 1, need_grad: bool = True):
    """Composite loss over a batch of segments.

    ``segments`` is ``(B, T, C, ny, nx)`` of truth frames and ``x_prev`` the
    ``(B, C, ny, nx)`` frame before each segment.  Returns ``(parts, gW, gD)``
    where ``parts`` holds ``L_total`` and its components.
    """
    K = assemble(W, D)
    B, T = segments.shape[:2]
    Z0 = encode_pairs(basis, segments[:, 0], x_prev).T  # (d, B)
    Zs, tape = _rollout(K, Z0, T, n_sub)
    Zall = np.stack(Zs, axis=1)  # (d, T, B)
    decoded = np.einsum("dtb,dn->btn", Zall, basis.modes).reshape(segments.shape)

    rec, pred = loss_recon_pred(decoded, segments, weights)
    sob, spec = loss_phys(decoded, segments)
    lat_latents = Zall.reshape(basis.d, -1).T
    lat_value, g_lat_z, gW_rep, gD_rep, lat_parts = loss_latent(lat_latents, K, weights)

    parts = {
        "L_recon": rec.value,
        "L_pred": pred.value,
        "L_latent": lat_value,
        "L_phys": sob.value + spec.value,
    }
    parts["L_total"] = (parts["L_recon"] + weights.w_pred * parts["L_pred"]
                        + weights.w_latent * parts["L_latent"] + weights.w_phys * parts["L_phys"])
    parts.update(lat_parts)
    parts["sobolev"] = sob.value
    parts["spectral"] = spec.value
    if not need_grad:
        return parts, None, None

    gx = rec.grad + weights.w_pred * pred.grad + weights.w_phys * (sob.grad + spec.grad)
    gz = np.einsum("btn,dn->dtb", gx.reshape(B, T, -1), basis.modes)
    gz += weights.w_latent * g_lat_z.T.reshape(basis.d, T, B)

    GK = np.zeros_like(K)
    h = 1.0 / n_sub
    a = gz[:, T - 1].copy()
    k = len(tape)
    for j in range(T - 1, 0, -1):
        for _ in range(n_sub):
            k -= 1
            a = _rk4_backward(K, a, tape[k], h, GK)
        a += gz[:, j - 1]
    gW, gD = k_grad_to_wd(GK)
    gW += weights.w_latent * gW_rep
    gD += weights.w_latent * gD_rep
    return parts, gW, gD


def _segment_starts(n_train, T):
    return np.arange(1, n_train - T + 1)


def _batch(snaps, starts, T):
    idx = starts[:, None] + np.arange(T)[None, :]
    return snaps[starts - 1], snaps[idx]


def _evaluate(W, D, basis, snaps, starts, T, weights, n_sub, batch_size):
    tot = {}
    gW = np.zeros_like(W)
    gD = np.zeros_like(D)
    n = len(starts)
    for i in range(0, n, batch_size):
        b = starts[i:i + batch_size]
        xp, seg = _batch(snaps, b, T)
        parts, w, dd = objective(W, D, basis, xp, seg, weights, n_sub)
        frac = len(b) / n
        for key, val in parts.items():
            tot[key] = tot.get(key, 0.0) + frac * val
        gW += frac * w
        gD += frac * dd
    tot["L_total"] = (tot["L_recon"] + weights.w_pred * tot["L_pred"]
                      + weights.w_latent * tot["L_latent"] + weights.w_phys * tot["L_phys"])
    return tot, float(np.sqrt(np.sum(gW**2) + np.sum(gD**2)))


def train(snapshots, basis: PODBasis, config: TrainConfig | None = None,
          weights: LossWeights | None = None, init=None, log_callback=None):
    """Fit ``(W, D)`` on the training split of normalized ``snapshots``.

    ``init`` optionally overrides the CT-DMD initialization with a ``(W, D)``
    pair.  Returns ``(KoopmanOperator, log)``; ``log`` holds one record per
    epoch, epoch 0 being the initialization.
    """
    config = config or TrainConfig()
    weights = weights or LossWeights()
    snaps = np.asarray(snapshots, dtype=float)
    n_train = split_train_val(len(snaps), config.val_fraction)
    train_snaps = snaps[:n_train]
    T = config.rollout_len
    starts = _segment_starts(n_train, T)
    if len(starts) < 1:
        raise ValueError(f"training split of {n_train} snapshots is too short for {T}-step segments")

    if init is None:
        W, D = fit_ctdmd(encode_trajectory(basis, train_snaps), dt=1.0, ridge=config.ridge)
    else:
        W, D = (np.array(a, dtype=float) for a in init)

    rng = np.random.default_rng(config.seed)
    eval_starts = np.sort(rng.choice(starts, size=min(config.eval_segments, len(starts)), replace=False))
    opt = AdamW([W, D], lr=config.lr, weight_decay=config.weight_decay)
    log = []

    def record(epoch, t0):
        parts, gnorm = _evaluate(W, D, basis, train_snaps, eval_starts, T, weights,
                                 config.rk4_substeps, config.batch_size)
        rec = {"epoch": epoch}
        rec.update({k: parts[k] for k in ("L_total", "L_recon", "L_pred", "L_latent", "L_phys")})
        rec["grad_norm"] = gnorm
        rec["spectral_abscissa"] = spectrum(assemble(W, D)).spectral_abscissa
        rec["wall_ms"] = (time.perf_counter() - t0) * 1e3
        log.append(rec)
        if log_callback is not None:
            log_callback(rec)
        logger.info("epoch %d: L_total=%.6g grad_norm=%.3g abscissa=%.4g", epoch,
                    rec["L_total"], gnorm, rec["spectral_abscissa"])

    record(0, time.perf_counter())
    batch_index = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(starts)
        for i in range(0, len(order), config.batch_size):
            b = order[i:i + config.batch_size]
            xp, seg = _batch(train_snaps, b, T)
            parts, gW, gD = objective(W, D, basis, xp, seg, weights, config.rk4_substeps)
            val = parts["L_total"]
            if not np.isfinite(val) or val > DIVERGENCE_LIMIT:
                raise TrainingDivergedError(batch_index, val)
            opt.step([gW, gD])
            batch_index += 1
        if config.stabilize_margin is not None:
            K = assemble(W, D)
            shift = K - stabilize(K, config.stabilize_margin)
            D -= shift  # multiple of the identity, lands in the symmetric part
        record(epoch, t0)

    return KoopmanOperator(W, D), log
