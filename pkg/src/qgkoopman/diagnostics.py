"""Rollout metrics and physical invariants.

Skill scores (RMSE, ACC, error growth) are computed in normalized units;
kinetic energy, enstrophy and spectra in physical units after
denormalization.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .koopman import Propagator, rk4_step, spectrum
from .latent_space import PODBasis, decode, encode
from .qg_core import QGParams, get_grid, invert_pv

__all__ = [
    "RolloutReport",
    "acc",
    "autocorrelation",
    "drift",
    "enstrophy",
    "error_growth_rate",
    "evaluate_rollout",
    "ke_spectrum",
    "kinetic_energy",
    "rmse",
]


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def acc(pred, truth, climatology) -> float:
    """Pearson correlation of anomalies about ``climatology``.

    Returns ``nan`` (with a warning) when either anomaly has zero variance.
    """
    a = (np.asarray(pred, dtype=float) - climatology).ravel()
    b = (np.asarray(truth, dtype=float) - climatology).ravel()
    a = a - a.mean()
    b = b - b.mean()
    na = np.sqrt(np.dot(a, a))
    nb = np.sqrt(np.dot(b, b))
    if na == 0 or nb == 0:
        warnings.warn("ACC undefined for a zero-variance anomaly", RuntimeWarning, stacklevel=2)
        return float("nan")
    return float(np.dot(a, b) / (na * nb))


def _ke_bins(params: QGParams):
    g = get_grid(params)
    dk = 2.0 * np.pi / params.L
    idx = np.rint(np.sqrt(g.k2) / dk).astype(int)
    mult = np.full(idx.shape, 2.0)
    mult[:, 0] = 1.0
    if params.nx % 2 == 0:
        mult[:, -1] = 1.0
    return idx, mult, idx.max() + 1


def ke_spectrum(psi_hat, params: QGParams):
    """Depth-weighted isotropic KE spectrum from rfft2 streamfunction ``(..., 2, ny, nkx)``.

    Each bin collects ``1/2 |k|^2 |psi_k|^2 / M^2`` over the wavevectors whose
    ``|k|`` rounds to that integer multiple of ``2 pi / L``; the bins sum to the
    domain-mean kinetic energy.  Returns ``(k_bins, values)`` with ``k_bins``
    in rad/m.
    """
    psi_hat = np.asarray(psi_hat)
    g = get_grid(params)
    idx, mult, nbins = _ke_bins(params)
    M2 = float(params.nx * params.ny) ** 2
    # derivative wavenumbers match compute_velocity, so Nyquist modes carry no KE
    kd2 = g.kx_deriv**2 + g.ky_deriv**2
    dens = 0.5 * kd2 * np.abs(psi_hat) ** 2 * mult / M2
    w = np.array([params.H1, params.H2]) / params.H
    dens = np.tensordot(w, np.moveaxis(dens, -3, 0), axes=(0, 0))
    flat = dens.reshape(dens.shape[:-2] + (-1,))
    onehot = np.zeros((idx.size, nbins))
    onehot[np.arange(idx.size), idx.ravel()] = 1.0
    out = flat @ onehot
    k = np.arange(nbins) * 2.0 * np.pi / params.L
    return k, out


def kinetic_energy(psi_hat, params: QGParams):
    """Depth-weighted domain-mean KE (sum of the spectrum)."""
    return ke_spectrum(psi_hat, params)[1].sum(axis=-1)


def enstrophy(q) -> np.ndarray:
    """``1/2 <q_m^2>`` per layer."""
    return 0.5 * np.mean(np.asarray(q, dtype=float) ** 2, axis=(-2, -1))


def drift(series, mode: str = "window", frac: float = 0.05) -> float:
    """``(E_T - E_0) / E_0``.

    In ``window`` mode ``E_0`` and ``E_T`` are means over the first and last
    ``frac`` of the series (at least one sample); ``endpoint`` uses the raw
    first and last values.
    """
    x = np.asarray(series, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("drift of an empty series")
    if mode == "endpoint":
        e0, eT = x[0], x[-1]
    elif mode == "window":
        n = max(1, int(math.floor(frac * x.size)))
        e0, eT = x[:n].mean(), x[-n:].mean()
    else:
        raise ValueError(f"unknown drift mode {mode!r}")
    if e0 == 0:
        raise ZeroDivisionError("drift undefined for E_0 = 0")
    return float((eT - e0) / e0)


def error_growth_rate(err_0: float, err_T: float, T: float) -> float:
    """``log(err_T / err_0) / T``; ``nan`` with a warning when ``err_0 == 0``."""
    if T <= 0:
        raise ValueError("T must be positive")
    if err_0 == 0:
        warnings.warn("error growth rate undefined for zero initial error", RuntimeWarning,
                      stacklevel=2)
        return float("nan")
    return float(np.log(err_T / err_0) / T)


def autocorrelation(series, max_lag: int):
    """Temporal Pearson autocorrelation per grid point, averaged over space.

    ``series`` has time on axis 0.  Points whose values are constant in time
    are excluded.  Returns ``(values, n_excluded)`` with ``values[0] == 1``.
    """
    x = np.asarray(series, dtype=float)
    n = x.shape[0]
    if n <= max_lag:
        raise ValueError(f"series of length {n} too short for lag {max_lag}")
    x = x.reshape(n, -1)
    active = np.ptp(x, axis=0) > 0
    x = x[:, active]
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for lag in range(1, max_lag + 1):
        a = x[:n - lag] - x[:n - lag].mean(axis=0)
        b = x[lag:] - x[lag:].mean(axis=0)
        den = np.sqrt(np.sum(a * a, axis=0) * np.sum(b * b, axis=0))
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.sum(a * b, axis=0) / den
        r = r[np.isfinite(r)]
        out[lag] = r.mean() if r.size else np.nan
    return out, int((~active).sum())


@dataclass
class RolloutReport:
    per_step: list
    ke_spectrum: dict
    autocorrelation: dict
    ke_drift: float
    enstrophy_drift: float
    lam: float
    horizon_steps: int
    blew_up: bool = False
    blow_up_step: int | None = None
    max_abs_normalized: float = 0.0
    meta: dict = field(default_factory=dict)
    latents: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "horizon_steps": self.horizon_steps,
            "lambda": self.lam,
            "ke_drift": self.ke_drift,
            "enstrophy_drift": self.enstrophy_drift,
            "blew_up": self.blew_up,
            "blow_up_step": self.blow_up_step,
            "max_abs_normalized": self.max_abs_normalized,
            "per_step": self.per_step,
            "ke_spectrum": self.ke_spectrum,
            "autocorrelation": self.autocorrelation,
            "meta": self.meta,
        }

    def write(self, out_dir, K=None) -> None:
        """``report.json`` plus ``per_step.csv``, ``spectrum.csv``, ``autocorr.csv``, ``eigs.csv``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(_jsonable(self.to_dict()), indent=1))
        cols = ["step", "t", "rmse", "acc", "ke", "enstrophy", "ke_true", "enstrophy_true"]
        _write_csv(out / "per_step.csv", cols, [[r.get(c) for c in cols] for r in self.per_step])
        s = self.ke_spectrum
        _write_csv(out / "spectrum.csv", ["k", "pred", "truth"],
                   itertools.zip_longest(s.get("k", []), s.get("pred", []), s.get("truth", [])))
        a = self.autocorrelation
        _write_csv(out / "autocorr.csv", ["lag", "pred", "truth"],
                   itertools.zip_longest(a.get("lag", []), a.get("pred", []), a.get("truth", [])))
        if K is not None:
            (out / "eigs.csv").write_text(spectrum(K).to_csv())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for v in row])


def _physical(basis: PODBasis, x_norm, params: QGParams):
    """KE and depth-weighted enstrophy of normalized ``(q1, q2, ...)`` fields."""
    q = basis.stats.denormalize(x_norm)[..., :2, :, :]
    qh = np.fft.rfft2(q)
    qh[..., 0, 0] = 0.0
    psi_hat = invert_pv(np.moveaxis(qh, -3, 0), params)
    psi_hat = np.moveaxis(psi_hat, 0, -3)
    q_anom = np.fft.irfft2(qh, s=q.shape[-2:])
    w = np.array([params.H1, params.H2]) / params.H
    ens = np.sum(w * enstrophy(q_anom), axis=-1)
    return psi_hat, ens


def evaluate_rollout(operator, basis: PODBasis, snapshots, horizon: int, mode: str = "matrix_exp",
                     *, params: QGParams, start: int = 1, dt_query: float = 1.0,
                     climatology=None, dt_snapshot: float = 18000.0, early_step: int = 1,
                     max_lag: int = 50, drift_mode: str = "window",
                     keep_latents: bool = False) -> RolloutReport:
    """Roll the latent state out ``horizon`` query steps of ``dt_query`` snapshot units.

    The initial latent is the dual-stream encoding of ``snapshots[start]``
    and ``snapshots[start - 1]``.  Metrics against truth are reported at
    query times that coincide with a stored snapshot; elsewhere they are
    ``None``.
    """
    if mode not in ("matrix_exp", "rk4"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if start < 1:
        raise ValueError("start must be >= 1 (the history frame is start - 1)")
    snaps = np.asarray(snapshots, dtype=float)
    K = operator.K if hasattr(operator, "K") else np.asarray(operator, dtype=float)
    if climatology is None:
        climatology = np.zeros(basis.shape)
    prop = Propagator(K)
    z = encode(basis, snaps[start], snaps[start - 1]).z

    per_step, latents, preds, truths, truth_idx = [], [], [], [], []
    blew_up, blow_step, max_abs = False, None, 0.0
    for j in range(1, horizon + 1):
        if mode == "matrix_exp":
            z = prop.matrix(dt_query) @ z
        else:
            z = rk4_step(K, z, dt_query)
        x = decode(basis, z)
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(x))):
            blew_up, blow_step = True, j
            break
        max_abs = max(max_abs, float(np.abs(x).max()))
        latents.append(z.copy())
        t_units = j * dt_query
        rec = {"step": j, "t": t_units * dt_snapshot}
        idx = start + t_units
        near = int(round(idx))
        if abs(idx - near) < 1e-9 and near < len(snaps):
            truth = snaps[near]
            rec["rmse"] = rmse(x, truth)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                rec["acc"] = acc(x, truth, climatology)
            rec["err_norm"] = float(np.linalg.norm(x - truth))
            truths.append(truth)
            truth_idx.append(j)
        else:
            rec.update(rmse=None, acc=None, err_norm=None)
        preds.append(x)
        per_step.append(rec)

    n = len(preds)
    report_spec, report_ac = {}, {}
    ke_drift = ens_drift = lam = float("nan")
    if n:
        P = np.stack(preds)
        psi_hat, ens = _physical(basis, P, params)
        ke = kinetic_energy(psi_hat, params)
        for r, e, s in zip(per_step, ke, ens):
            r["ke"], r["enstrophy"] = float(e), float(s)
        k, spec_pred = ke_spectrum(psi_hat, params)
        report_spec = {"k": k, "pred": spec_pred.mean(axis=0)}
        if n > 1:
            ke_drift = drift(ke, drift_mode)
            ens_drift = drift(ens, drift_mode)
        if truths:
            Tr = np.stack(truths)
            psi_t, ens_t = _physical(basis, Tr, params)
            ke_t = kinetic_energy(psi_t, params)
            for j, e, s in zip(truth_idx, ke_t, ens_t):
                per_step[j - 1]["ke_true"], per_step[j - 1]["enstrophy_true"] = float(e), float(s)
            report_spec["truth"] = ke_spectrum(psi_t, params)[1].mean(axis=0)
        lag = min(max_lag, n - 1)
        if lag >= 1:
            ac_pred, _ = autocorrelation(P[:, 0], lag)
            report_ac = {"lag": np.arange(lag + 1), "pred": ac_pred}
            with_truth = [i for i in range(n) if per_step[i].get("rmse") is not None]
            if len(with_truth) == n:
                report_ac["truth"] = autocorrelation(np.stack(truths)[:, 0], lag)[0]
        errs = {r["step"]: r["err_norm"] for r in per_step if r.get("err_norm") is not None}
        last = max(errs) if errs else None
        if last is not None and early_step in errs and last > early_step:
            elapsed = (last - early_step) * dt_query
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                lam = error_growth_rate(errs[early_step], errs[last], elapsed)

    return RolloutReport(
        per_step=per_step, ke_spectrum=report_spec, autocorrelation=report_ac,
        ke_drift=ke_drift, enstrophy_drift=ens_drift, lam=lam, horizon_steps=horizon,
        blew_up=blew_up, blow_up_step=blow_step, max_abs_normalized=max_abs,
        meta={"mode": mode, "dt_query_units": dt_query, "dt_snapshot_seconds": dt_snapshot,
              "start": start, "error_norm": "global L2 over normalized channels",
              "lambda_time_unit": "snapshot interval", "lambda_early_step": early_step,
              "drift_mode": drift_mode, "autocorrelation_field": "q1"},
        latents=np.array(latents) if keep_latents else None,
    )
