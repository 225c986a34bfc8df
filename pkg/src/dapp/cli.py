"""Command-line interface: ``dapp simulate | fit | predict | report``.

Spike-train files hold one trial per line as ``condition,trial_id,t1 t2 ...``
with times in ms and condition one of A, B, AB. An optional first line
``# horizon=<T>`` declares the response window; other ``#`` lines are
comments. Rates given on the command line are in Hz.

Exit codes: 0 success, 2 usage or configuration error, 3 insufficient data,
4 numerical failure. ``DAPP_THREADS`` caps the worker pool used by
``fit --chains``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy.special import expit

from .core import BinnedDataset, DomainError, TimeGrid, read_spike_trains, write_spike_trains
from .first_stage import GammaPriorTable, InsufficientDataError, build_prior_table
from .gp import NumericalError
from .predictive import (
    PredictiveSummary,
    chain_lengthscale_pmf,
    mc_error,
    predictive_draws,
    prior_predictive_draws,
    recovery_checks,
    recovery_statistics,
    summarize_predictive,
)
from .sampler import ChainConfig, ChainError, ChainOutput, run_chain
from .simulator import ExperimentSpec, simulate_dataset, truth_alpha_matrix

log = logging.getLogger("dapp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TRAINS_FILE = "trains.txt"


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


class RunManifest:
    """``manifest.json`` written when a command starts and finalized when it ends."""

    def __init__(self, directory, command: str, config: dict, seed, inputs: dict):
        self.path = Path(directory) / "manifest.json"
        self.body = {
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
            "outputs": {},
            "version": _version(),
            "python": platform.python_version(),
            "status": "running",
            "timings": {},
        }
        self._t0 = time.perf_counter()
        self._flush()

    def _flush(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.body, indent=2, default=str) + "\n")

    def finalize(self, outputs: dict, status="ok", **timings):
        self.body["outputs"] = {k: str(v) for k, v in outputs.items()}
        self.body["status"] = status
        self.body["timings"] = {"wall_seconds": time.perf_counter() - self._t0, **timings}
        self._flush()


def _out_dir(path) -> Path:
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {d}: {exc}") from None
    if not os.access(d, os.W_OK):
        raise UsageError(f"output directory {d} is not writable")
    return d


def _write_counts(path, data: BinnedDataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "trial_id"] + [str(m) for m in range(1, data.grid.n_bins + 1)])
        for cond in ("A", "B", "AB"):
            for tid, row in zip(data.trial_ids[cond], data.counts[cond]):
                w.writerow([cond, tid] + [int(x) for x in row])


def load_dataset(directory, bin_width: float, horizon: float | None = None):
    """Read ``trains.txt`` from a dataset directory and bin it."""
    path = Path(directory) / TRAINS_FILE
    if not path.exists():
        raise UsageError(f"no {TRAINS_FILE} in {directory}")
    trains, declared = read_spike_trains(path)
    T = horizon or declared
    if T is None:
        raise UsageError("horizon unknown: add '# horizon=T' to the trains file or pass --horizon")
    grid = TimeGrid.from_bin_width(T, bin_width)
    return trains, BinnedDataset.from_trains(trains, grid)


def load_truth(directory):
    p = Path(directory) / "truth.json"
    return json.loads(p.read_text()) if p.exists() else None


# --- simulate --------------------------------------------------------------------


def cmd_simulate(args) -> int:
    if args.spec:
        spec = ExperimentSpec.from_json(args.spec)
    else:
        exact = tuple(int(x) for x in args.exact_counts.split(",")) if args.exact_counts else None
        spec = ExperimentSpec(
            experiment=args.experiment, lamA=args.lamA / 1000.0, lamB=args.lamB / 1000.0,
            n_A=args.n_a, n_B=args.n_b, n_AB=args.n_ab, horizon=args.horizon, seed=args.seed,
            bin_width=args.bin_width, exact_counts=exact,
        )
    out = _out_dir(args.out)
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in spec.__dict__.items()}
    man = RunManifest(out, "simulate", cfg, spec.seed, {"spec": args.spec})
    trains, data, truth = simulate_dataset(spec)
    write_spike_trains(out / TRAINS_FILE, trains, spec.horizon)
    _write_counts(out / "counts.csv", data)
    (out / "truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    man.finalize({"trains": out / TRAINS_FILE, "counts": out / "counts.csv", "truth": out / "truth.json"})
    print(f"wrote {len(trains)} spike trains to {out}")
    return EXIT_OK


# --- fit -------------------------------------------------------------------------


def _pool_size(n_chains: int) -> int:
    env = os.environ.get("DAPP_THREADS")
    cap = int(env) if env and env.isdigit() and int(env) > 0 else (os.cpu_count() or 1)
    return max(1, min(n_chains, cap))


def _run_one(job):
    data, cfg_dict, prior, directory = job
    cfg = ChainConfig.from_dict(cfg_dict)
    t0 = time.perf_counter()
    out = run_chain(data, cfg, prior)
    out.write(directory)
    return str(directory), time.perf_counter() - t0


def cmd_fit(args) -> int:
    trains, data = load_dataset(args.data, args.bin_width, args.horizon)
    if data.n("AB") < 1:
        raise InsufficientDataError("dataset has no AB trials")
    if args.prior_table:
        prior = GammaPriorTable.from_csv(args.prior_table)
        if prior.n_bins != data.grid.n_bins:
            raise DomainError(f"prior table has {prior.n_bins} bins, grid has {data.grid.n_bins}")
    else:
        prior = build_prior_table(data.XA, data.XB, data.grid)
    base = ChainConfig(
        iterations=args.iters, burnin=args.burnin, n_save=args.save, variant=args.variant,
        seed=args.seed,
    )
    out = _out_dir(args.out)
    man = RunManifest(out, "fit", {**base.to_dict(), "chains": args.chains, "bin_width": args.bin_width,
                                   "horizon": data.grid.horizon}, args.seed,
                      {"data": args.data, "prior_table": args.prior_table})
    prior.to_csv(out / "prior_table.csv")
    jobs = []
    for k in range(args.chains):
        cfg = base.to_dict()
        cfg["seed"] = args.seed + k
        jobs.append((data, cfg, prior, out / f"chain_{k + 1}"))
    workers = _pool_size(args.chains)
    if workers == 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, jobs))
    man.finalize({f"chain_{k + 1}": d for k, (d, _) in enumerate(results)},
                 chain_seconds=[t for _, t in results])
    print(f"fitted {args.chains} chain(s) on {data.n('AB')} AB trials; output in {out}")
    return EXIT_OK


# --- predict ---------------------------------------------------------------------


def chain_dirs(fit_dir) -> list[Path]:
    d = Path(fit_dir)
    dirs = sorted((p for p in d.glob("chain_*") if (p / "config.json").exists()),
                  key=lambda p: int(p.name.split("_")[1]))
    if not dirs and (d / "config.json").exists():
        dirs = [d]
    return dirs


def load_chains(fit_dir, n: int | None = None) -> list[ChainOutput]:
    dirs = chain_dirs(fit_dir)
    if not dirs:
        raise UsageError(f"no chain output under {fit_dir}")
    outs = [ChainOutput.read(p) for p in dirs[:n]]
    if any(not o.draws for o in outs):
        raise InsufficientDataError("chain output has no saved iterations")
    return outs


def pooled_predictive(outputs, n_draws: int, rng, equal_weights=False):
    """``n_draws`` predictive curves spread round-robin over the chains."""
    per = [n_draws // len(outputs) + (k < n_draws % len(outputs)) for k in range(len(outputs))]
    draws = []
    for o, n in zip(outputs, per):
        if n:
            draws.extend(predictive_draws(o, n, rng, equal_weights))
    return draws


def cmd_predict(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = _out_dir(args.out)
    extra = {}
    if args.prior_only:
        if args.fit:
            o = load_chains(args.fit, 1)[0]
            grid, ls, hyper = o.grid, o.lengthscales, o.config.hyper
        else:
            grid, ls, hyper = TimeGrid.from_bin_width(args.horizon or 1000.0, args.bin_width), None, None
        man = RunManifest(out, "predict", {"prior_only": True, "draws": args.draws}, args.seed, {"fit": args.fit})
        draws = prior_predictive_draws(grid, args.draws, rng, hyper, ls)
        summary = summarize_predictive(draws, grid.horizon, ls if ls is not None else [d.ell for d in draws])
    else:
        if not args.fit:
            raise UsageError("--fit is required unless --prior-only is given")
        outputs = load_chains(args.fit, args.chains)
        man = RunManifest(out, "predict", {"draws": args.draws, "chains": len(outputs),
                                           "equal_weights": args.equal_weights}, args.seed, {"fit": args.fit})
        draws = pooled_predictive(outputs, args.draws, rng, args.equal_weights)
        pmfs = [chain_lengthscale_pmf(o, args.equal_weights) for o in outputs]
        summary = summarize_predictive(draws, outputs[0].grid.horizon, outputs[0].lengthscales,
                                       ell_pmf=np.mean(pmfs, axis=0))
        extra["lengthscales"] = list(outputs[0].lengthscales.values)
        extra["chain_ell_pmf"] = [p.tolist() for p in pmfs]
        if len(outputs) > 1:
            extra["mc_error"] = mc_error(pmfs)
            print(f"mc_error across {len(outputs)} chains: {extra['mc_error']:.4f}")
    summary.write(out, extra)
    man.finalize({"summary": out / "summary.json"})
    print(f"wrote {summary.n_draws} predictive draws to {out / 'summary.json'}")
    return EXIT_OK


# --- report ----------------------------------------------------------------------


def posterior_mean_alpha(outputs) -> np.ndarray:
    return np.mean([expit(np.asarray(d["eta"])) for o in outputs for d in o.draws], axis=0)


def alpha_rmse(post_mean, truth: dict, grid: TimeGrid) -> np.ndarray:
    true = truth_alpha_matrix(truth, grid)
    return np.sqrt(np.mean((np.asarray(post_mean) - true) ** 2, axis=1))


def build_report(outputs, truth: dict | None, summary=None) -> dict:
    grid = outputs[0].grid
    report = {"n_chains": len(outputs), "n_trials": outputs[0].n_trials, "rmse": None, "criteria": None}
    if truth is None:
        warnings.warn("no truth.json found; skipping truth-dependent rows")
        return report
    post = posterior_mean_alpha(outputs)
    rmse = alpha_rmse(post, truth, grid)
    report["rmse"] = [
        {"trial_id": t.get("trial_id", str(j + 1)), "kind": t["kind"], "rmse": float(r)}
        for j, (t, r) in enumerate(zip(truth["trials"], rmse))
    ]
    report["mean_rmse"] = float(np.mean(rmse))
    exp = truth.get("experiment")
    if summary is not None and exp in (1, 2, 3):
        stats = recovery_statistics(summary)
        checks = recovery_checks(exp, stats)
        report["criteria"] = {"experiment": exp, "statistics": stats, "checks": checks,
                              "pass": all(c["pass"] for c in checks.values())}
    return report


def cmd_report(args) -> int:
    outputs = load_chains(args.fit)
    truth = load_truth(args.data) if args.data else None
    summary = None
    if args.predict:
        summary = PredictiveSummary.from_dict(json.loads((Path(args.predict) / "summary.json").read_text()))
    elif truth is not None:
        summary = summarize_predictive(
            pooled_predictive(outputs, args.draws, np.random.default_rng(args.seed)),
            outputs[0].grid.horizon, outputs[0].lengthscales,
        )
    report = build_report(outputs, truth, summary)
    target = Path(args.out)
    _out_dir(target.parent)
    target.write_text(json.dumps(report, indent=2) + "\n")
    if report["rmse"] is not None:
        print(f"mean RMSE of posterior-mean alpha: {report['mean_rmse']:.4f}")
    if report["criteria"]:
        for name, c in report["criteria"]["checks"].items():
            print(f"{'PASS' if c['pass'] else 'FAIL'} {name}: {c['value']:.4g} ({c['threshold']})")
    return EXIT_OK


# --- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dapp", description="Dynamic admixture of Poisson processes")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a synthetic dual-stimulus dataset")
    s.add_argument("--experiment", type=int, choices=(1, 2, 3), default=1)
    s.add_argument("--spec", help="JSON experiment spec (overrides the other options)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--lamA", type=float, default=400.0, help="A-trial rate in Hz")
    s.add_argument("--lamB", type=float, default=100.0, help="B-trial rate in Hz")
    s.add_argument("--n-a", type=int, default=20)
    s.add_argument("--n-b", type=int, default=20)
    s.add_argument("--n-ab", type=int, default=20)
    s.add_argument("--horizon", type=float, default=1000.0, help="response window in ms")
    s.add_argument("--bin-width", type=float, default=50.0, help="bin width in ms for counts.csv")
    s.add_argument("--exact-counts", help="comma-separated AB trials per mixture component, e.g. 11,9")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="two-stage fit with the Gibbs sampler")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--iters", type=int, default=10_000)
    f.add_argument("--burnin", type=int, default=1_000)
    f.add_argument("--save", type=int, default=1_000)
    f.add_argument("--chains", type=int, default=1)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--variant", choices=("dapp", "alt-dp"), default="dapp")
    f.add_argument("--bin-width", type=float, default=50.0)
    f.add_argument("--horizon", type=float)
    f.add_argument("--prior-table", help="CSV gamma prior table (condition,bin,shape,rate)")
    f.set_defaults(func=cmd_fit)

    q = sub.add_parser("predict", help="posterior-predictive summaries")
    q.add_argument("--fit")
    q.add_argument("--out", required=True)
    q.add_argument("--draws", type=int, default=1_000)
    q.add_argument("--chains", type=int, help="use only the first N chains")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--prior-only", action="store_true")
    q.add_argument("--equal-weights", action="store_true", help="equal urn weight per distinct atom")
    q.add_argument("--bin-width", type=float, default=50.0)
    q.add_argument("--horizon", type=float)
    q.set_defaults(func=cmd_predict)

    r = sub.add_parser("report", help="recovery report against simulation truth")
    r.add_argument("--fit", required=True)
    r.add_argument("--data")
    r.add_argument("--predict", help="predict output directory to reuse")
    r.add_argument("--out", required=True, help="report JSON path")
    r.add_argument("--draws", type=int, default=1_000)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InsufficientDataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ChainError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DomainError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
