"""``qgk`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import formats
from .config import ConfigError, RunConfig
from .diagnostics import evaluate_rollout
from .koopman import KoopmanOperator, matrix_exp, spectrum
from .latent_space import PODBasis, fit_pod
from .qg_core import QGParams, generate_dataset, initial_state, integrate
from .training import TrainingDivergedError, split_train_val, train

__all__ = ["cmd_bench", "cmd_generate", "cmd_pod", "cmd_rollout", "cmd_spectrum", "cmd_train", "main"]

logger = logging.getLogger("qgkoopman")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(ValueError):
    pass


def _echo_config(path, config: RunConfig) -> None:
    Path(str(path) + ".config.yaml").write_text(config.to_yaml(), encoding="utf-8")


def cmd_generate(config: RunConfig, out_path, seed: int | None = None, stats_from=None) -> dict:
    params = config.params
    ds = config.dataset
    stats = formats.read_dataset(stats_from).stats if stats_from else None
    data_seed = config.seeds()[0] if seed is None else seed
    t0 = time.perf_counter()
    snaps, stats = generate_dataset(params, ds.spinup_days, ds.run_days, ds.subsample,
                                    ds.out_resolution, data_seed, path=out_path, stats=stats)
    _echo_config(out_path, config)
    info = {"path": str(out_path), "n_snapshots": int(snaps.shape[0]),
            "shape": list(snaps.shape), "dt_snapshot_seconds": params.dt * ds.subsample,
            "wall_s": time.perf_counter() - t0,
            "mean": stats.mean.tolist(), "std": stats.std.tolist()}
    return info


def _train_split(data: formats.Dataset):
    return data.snapshots[:split_train_val(len(data.snapshots))]


def cmd_pod(config: RunConfig, data_path, out_basis) -> PODBasis:
    data = formats.read_dataset(data_path)
    basis = fit_pod(_train_split(data), config.model.d, data.stats)
    formats.write_basis(out_basis, basis)
    _echo_config(out_basis, config)
    return basis


def cmd_train(config: RunConfig, data_path, out_operator, out_basis=None, basis_path=None,
              log_path=None):
    """fit_pod -> fit_ctdmd -> train; writes basis, operator and JSON-lines log."""
    data = formats.read_dataset(data_path)
    if basis_path is not None:
        basis = formats.read_basis(basis_path)
        if tuple(basis.shape) != tuple(data.snapshots.shape[1:]):
            raise UsageError(f"basis grid {basis.shape} does not match dataset {data.snapshots.shape[1:]}")
    else:
        if config.dataset.out_resolution != data.snapshots.shape[-1]:
            raise UsageError(f"dataset resolution {data.snapshots.shape[-1]} does not match "
                             f"config out_resolution {config.dataset.out_resolution}")
        basis = fit_pod(_train_split(data), config.model.d, data.stats)
    if out_basis is not None:
        formats.write_basis(out_basis, basis)
        _echo_config(out_basis, config)

    log_fh = open(log_path, "w") if log_path else None

    def on_epoch(rec):
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

    try:
        op, log = train(data.snapshots, basis, config.model.train_config(config.seeds()[1]),
                        config.model.loss_weights(), log_callback=on_epoch)
    finally:
        if log_fh:
            log_fh.close()
    formats.write_operator(out_operator, op.W, op.D)
    _echo_config(out_operator, config)
    if log_path:
        _echo_config(log_path, config)
    return op, basis, log


def cmd_rollout(config: RunConfig, operator_path, basis_path, data_path, out_dir,
                horizon: int | None = None, dt_query_hours: float | None = None,
                start: int = 1, keep_latents: bool = False):
    W, D = formats.read_operator(operator_path)
    op = KoopmanOperator(W, D)
    basis = formats.read_basis(basis_path)
    data = formats.read_dataset(data_path)
    horizon = config.eval.horizon if horizon is None else horizon
    dtq = config.eval.dt_query_hours if dt_query_hours is None else dt_query_hours
    if horizon < 0:
        raise UsageError("horizon must be non-negative")
    dt_units = dtq * 3600.0 / data.dt_snapshot
    clim = _train_split(data).mean(axis=0)
    r = data.snapshots.shape[-1]
    params = config.params.replace(nx=r, ny=r)
    report = evaluate_rollout(op, basis, data.snapshots, horizon, config.eval.mode, params=params,
                              start=start, dt_query=dt_units, climatology=clim,
                              dt_snapshot=data.dt_snapshot, early_step=config.eval.early_step,
                              max_lag=config.eval.max_lag, keep_latents=keep_latents)
    report.meta["config"] = config.to_dict()
    report.meta["dt_query_hours"] = dtq
    if out_dir is not None:
        report.write(out_dir, op.K)
    return report


def cmd_spectrum(operator_path, out_csv=None):
    W, D = formats.read_operator(operator_path)
    spec = spectrum(KoopmanOperator(W, D).K)
    if out_csv is not None:
        Path(out_csv).write_text(spec.to_csv())
    return spec


def _median_time(fn, reps: int, inner: int) -> float:
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) / inner)
    return statistics.median(samples)


def cmd_bench(K, basis: PODBasis | None, params: QGParams, n_steps: int = 100,
              latent_only: bool = False, snapshot_steps: int = 5) -> dict:
    """Per-5 h wall time of the surrogate (cached exponential + decode) versus the solver.

    Single-threaded, warmed up, median over ``n_steps`` repetitions.
    """
    if n_steps < 1:
        raise UsageError("n_steps must be at least 1")
    K = np.asarray(K, dtype=float)
    E = matrix_exp(K, 1.0)
    z = np.random.default_rng(0).standard_normal(K.shape[0]) / np.sqrt(K.shape[0])
    modes_t = None if basis is None else np.ascontiguousarray(basis.modes.T)
    with threadpool_limits(1):
        if latent_only or modes_t is None:
            def surrogate():
                E @ z
            inner = 200
        else:
            def surrogate():
                modes_t @ (E @ z)
            inner = 5
        surrogate()
        t_sur = _median_time(surrogate, n_steps, inner)
        result = {"n_steps": n_steps, "d": int(K.shape[0]), "latent_only": latent_only,
                  "surrogate_s_per_step": t_sur}
        if not latent_only:
            state = integrate(initial_state(params, 0), params, 10)
            hist: list = []

            def solver():
                nonlocal state
                state = integrate(state, params, snapshot_steps, hist)

            solver()
            t_sol = _median_time(solver, n_steps, 1)
            result.update(solver_s_per_step=t_sol, ratio=t_sol / t_sur,
                          grid=[params.ny, params.nx])
    return result


def _build_parser() -> argparse.ArgumentParser:
    class Parser(argparse.ArgumentParser):
        def error(self, message):
            self.print_usage(sys.stderr)
            self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")

    p = Parser(prog="qgk", description="Two-layer QG data, Koopman surrogate training and rollout.")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/FFT worker threads")
    p.add_argument("--deterministic", action="store_true", help="force sequential reductions")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=Parser)

    c = sub.add_parser("config", help="configuration helpers")
    csub = c.add_subparsers(dest="config_cmd", required=True, parser_class=Parser)
    ci = csub.add_parser("init", help="emit the default configuration")
    ci.add_argument("-o", "--out", default=None)

    g = sub.add_parser("generate", help="integrate the QG model and write a dataset")
    g.add_argument("-c", "--config")
    g.add_argument("-o", "--out", required=True)
    g.add_argument("--seed", type=int, default=None, help="override the derived dataset seed")
    g.add_argument("--stats-from", default=None, help="reuse the normalization of another dataset")

    pd = sub.add_parser("pod", help="fit the POD basis on the training split")
    pd.add_argument("-c", "--config")
    pd.add_argument("--data", required=True)
    pd.add_argument("-o", "--out", required=True)

    t = sub.add_parser("train", help="fit POD, CT-DMD and refine the operator")
    t.add_argument("-c", "--config")
    t.add_argument("--data", required=True)
    t.add_argument("-o", "--out", required=True, help="operator file (QGKO)")
    t.add_argument("--basis", default=None, help="use an existing basis instead of fitting")
    t.add_argument("--basis-out", default=None)
    t.add_argument("--log", default=None, help="JSON-lines training log")

    r = sub.add_parser("rollout", help="long-horizon rollout and diagnostics")
    r.add_argument("-c", "--config")
    r.add_argument("--operator", required=True)
    r.add_argument("--basis", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True, help="report directory")
    r.add_argument("--horizon", type=int, default=None)
    r.add_argument("--dt-query-hours", type=float, default=None)
    r.add_argument("--start", type=int, default=1)

    s = sub.add_parser("spectrum", help="export the operator eigenvalues as CSV")
    s.add_argument("--operator", required=True)
    s.add_argument("-o", "--out", required=True)

    b = sub.add_parser("bench", help="surrogate versus solver wall time")
    b.add_argument("-c", "--config")
    b.add_argument("--operator", required=True)
    b.add_argument("--basis", default=None)
    b.add_argument("--n-steps", type=int, default=100)
    b.add_argument("--latent-only", action="store_true")
    return p


def _load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _run(args) -> int:
    if args.cmd == "config":
        text = RunConfig().to_yaml()
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return EXIT_OK

    if args.cmd == "spectrum":
        spec = cmd_spectrum(args.operator, args.out)
        print(f"{len(spec.eigenvalues)} eigenvalues, spectral abscissa {spec.spectral_abscissa:.6g}")
        return EXIT_OK

    config = _load_config(args.config)
    if args.cmd == "generate":
        info = cmd_generate(config, args.out, seed=args.seed, stats_from=args.stats_from)
        print(f"wrote {info['n_snapshots']} snapshots {tuple(info['shape'][1:])} in {info['wall_s']:.1f}s")
        for name, m, s in zip(("q1", "q2", "psi1", "psi2"), info["mean"], info["std"]):
            print(f"  {name}: mean {m:.6g} std {s:.6g}")
    elif args.cmd == "pod":
        basis = cmd_pod(config, args.data, args.out)
        print(f"basis d={basis.d} N={basis.N}")
    elif args.cmd == "train":
        op, basis, log = cmd_train(config, args.data, args.out, out_basis=args.basis_out,
                                   basis_path=args.basis, log_path=args.log)
        last = log[-1]
        print(f"d={op.d} epochs={last['epoch']} L_total={last['L_total']:.6g} "
              f"abscissa={last['spectral_abscissa']:.4g}")
    elif args.cmd == "rollout":
        rep = cmd_rollout(config, args.operator, args.basis, args.data, args.out,
                          horizon=args.horizon, dt_query_hours=args.dt_query_hours, start=args.start)
        print(f"horizon {rep.horizon_steps}: blew_up={rep.blew_up} lambda={rep.lam:.4g} "
              f"ke_drift={rep.ke_drift:.4g} enstrophy_drift={rep.enstrophy_drift:.4g}")
        if rep.blew_up:
            return EXIT_NUMERIC
    elif args.cmd == "bench":
        W, D = formats.read_operator(args.operator)
        basis = formats.read_basis(args.basis) if args.basis else None
        res = cmd_bench(KoopmanOperator(W, D).K, basis, config.params, args.n_steps, args.latent_only)
        print(json.dumps(res, indent=1))
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads
    if threads is None and os.environ.get("QGK_THREADS"):
        threads = int(os.environ["QGK_THREADS"])
    if args.deterministic:
        threads = 1
    try:
        if threads:
            with threadpool_limits(threads):
                return _run(args)
        return _run(args)
    except (FloatingPointError, TrainingDivergedError) as exc:
        print(f"qgk: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, formats.FormatError) as exc:
        print(f"qgk: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"qgk: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
