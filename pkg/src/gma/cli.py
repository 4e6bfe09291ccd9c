"""Command-line interface.

Every command writes a ``result.json`` that echoes its full configuration,
so ``gma rerun result.json`` repeats the run exactly.  Exit codes: 0 success,
2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, GMAError, NumericalError
from .inference import bootstrap_population
from .io import read_dataset, read_result, write_csv, write_dataset, write_result
from .multilevel import (
    MultiSubjectDataset,
    SearchOpts,
    bcd_fixed_delta,
    fit_stack,
    population_effects,
    stack_dataset,
    two_stage_fixed_delta,
)
from .parallel import default_jobs
from .simulation import (
    replicate_table1,
    replicate_two_level,
    simulate_single,
    simulate_two_level,
    single_level_spec,
    two_level_spec,
)
from .single import fit_cmle, indirect_effect, sensitivity_curve

log = logging.getLogger("gma")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_MODULE_NAMES = {
    "ar": "ar-dynamics", "single": "single-level", "multilevel": "multi-level", "inference": "inference",
    "simulation": "sim-harness", "io": "cli", "cli": "cli", "parallel": "cli",
}


def parse_grid(text: str) -> list:
    """``LO:HI:STEP`` with both endpoints included (slack 1e-12)."""
    try:
        lo, hi, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like LO:HI:STEP, got {text!r}") from None
    if not step > 0 or hi < lo:
        raise argparse.ArgumentTypeError("grid needs STEP > 0 and HI >= LO")
    n = int(math.floor((hi - lo) / step + 1e-12 * max(1.0, abs(hi - lo) / step))) + 1
    return [round(lo + i * step, 12) for i in range(n)]


# -- serialization helpers ------------------------------------------------------


def _fit_dict(fit, with_vcov: bool = True) -> dict:
    th = fit.theta
    out = {
        "subject_id": fit.series_id, "delta": fit.delta, "p": th.p, "n_obs": fit.n_obs,
        "a": th.a, "b": th.b, "c": th.c, "ab": th.a * th.b,
        "theta1": th.theta1, "theta2": th.theta2,
        "sigma1_sq": fit.sigma1_sq, "sigma2_sq": fit.sigma2_sq, "kappa": fit.kappa,
        "omegas": [om for om in fit.omegas_hat], "loglik": fit.loglik,
    }
    if with_vcov and fit.vcov is not None:
        eff = indirect_effect(fit)
        k = 3 * th.p + 1
        out.update(ab_variance=eff.variance, ab_ci95=eff.ci95,
                   se={"a": math.sqrt(fit.vcov[0, 0]), "c": math.sqrt(fit.vcov[k, k]),
                       "b": math.sqrt(fit.vcov[-1, -1])})
    return out


def _two_level_dict(fit) -> dict:
    direct, indirect, omega_mean = population_effects(fit)
    return {
        "delta_hat": fit.delta_hat, "method": fit.method,
        "population": {"b": fit.population.b, "lambda": fit.population.lam},
        "effects": {"direct": direct, "indirect": indirect, "omega_mean": omega_mean},
        "h": fit.h, "h1": fit.h1, "h2": fit.h2,
        "iterations": fit.iterations, "converged": fit.converged, "h_trace": fit.h_trace,
        "subjects": [_fit_dict(f, with_vcov=False) for f in fit.subject_fits],
    }


def _config(ns: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(ns).items() if k not in ("func", "verbose")}


def _emit(ns, results: dict, files: list) -> None:
    out = Path(ns.out)
    doc = {"tool": "gma", "version": __version__, "command": ns.command, "config": _config(ns),
           "results": results, "files": sorted(files)}
    write_result(doc, out / "result.json")
    log.info("wrote %s", out / "result.json")


def _load(ns) -> MultiSubjectDataset:
    ds = read_dataset(ns.input)
    return ds.demeaned() if getattr(ns, "demean", False) else ds


def _search(ns) -> SearchOpts:
    return SearchOpts(lo=ns.delta_lo, hi=ns.delta_hi, n_grid=ns.n_grid)


# -- commands ---------------------------------------------------------------------


def cmd_simulate(ns) -> None:
    out = Path(ns.out)
    files = []
    for r in range(ns.reps):
        if ns.scenario == "table1":
            ds = MultiSubjectDataset([simulate_single(single_level_spec(ns.delta, ns.seed, (r,), T=ns.t))])
        else:
            spec = two_level_spec(ns.delta, ns.seed, (r,), N=ns.n, T=ns.t,
                                  t_dist="fixed" if ns.fixed_t else "poisson", sigma2_spread=ns.sigma2_spread)
            ds = simulate_two_level(spec)
        name = "dataset.csv" if ns.reps == 1 else f"dataset_{r + 1:03d}.csv"
        write_dataset(ds, out / name)
        files.append(name)
    _emit(ns, {"datasets": len(files)}, files)


def cmd_fit(ns) -> None:
    ds = _load(ns)
    out = Path(ns.out)
    if ns.level == "single":
        fits = [fit_cmle(s, ns.p, ns.delta) for s in ds.subjects]
        rows = [_fit_dict(f) for f in fits]
        write_csv([{k: r[k] for k in ("subject_id", "delta", "a", "b", "c", "ab", "ab_variance",
                                      "sigma1_sq", "sigma2_sq", "loglik")} for r in rows], out / "fits.csv")
        _emit(ns, {"level": "single", "fits": rows}, ["fits.csv"])
        return
    if ns.delta is not None:
        fit = two_stage_fixed_delta(ds, ns.p, ns.delta)
        if ns.method == "bcd":
            fit = bcd_fixed_delta(ds, ns.p, ns.delta, init=fit)
    else:
        fit = fit_stack(stack_dataset(ds, ns.p), ns.method, _search(ns))
    files = []
    if fit.profile:
        write_csv([{"delta": d, "h": h, "h2": h2} for d, h, h2 in fit.profile], out / "profile.csv")
        files.append("profile.csv")
    write_csv([{"subject_id": f.series_id, "a": f.theta.a, "b": f.theta.b, "c": f.theta.c,
                "sigma1_sq": f.sigma1_sq, "sigma2_sq": f.sigma2_sq, "loglik": f.loglik}
               for f in fit.subject_fits], out / "subjects.csv")
    files.append("subjects.csv")
    _emit(ns, {"level": "multi", "fit": _two_level_dict(fit)}, files)


def cmd_sensitivity(ns) -> None:
    ds = _load(ns)
    rows, curves = [], []
    for s in ds.subjects:
        curve = sensitivity_curve(s, ns.p, ns.grid)
        ll = curve.logliks
        curves.append({"subject_id": s.id, "a": curve.points[0].fit.theta.a,
                       "loglik_relative_spread": float(np.ptp(ll) / max(1e-300, np.abs(ll).max()))})
        for pt in curve.points:
            f = pt.fit
            rows.append({"subject_id": s.id, "delta": pt.delta, "a": f.theta.a, "b": f.theta.b, "c": f.theta.c,
                         "ab": pt.effect.ab, "ab_variance": pt.effect.variance, "ab_lo": pt.effect.ci95[0],
                         "ab_hi": pt.effect.ci95[1], "sigma1_sq": f.sigma1_sq, "sigma2_sq": f.sigma2_sq,
                         "loglik": f.loglik})
    write_csv(rows, Path(ns.out) / "sensitivity.csv")
    _emit(ns, {"subjects": curves, "grid": ns.grid}, ["sensitivity.csv"])


def cmd_bootstrap(ns) -> None:
    ds = _load(ns)
    stack = stack_dataset(ds, ns.p)
    search = _search(ns)
    point = fit_stack(stack, ns.method, search)
    res = bootstrap_population(ds, ns.p, ns.method, ns.b, ns.seed, jobs=ns.jobs, ci_method=ns.ci,
                               search=search, stack=stack, point_fit=point)
    draws = [{"replicate": r + 1, **{br.target: br.replicates[r] for br in res}} for r in range(ns.b)]
    write_csv(draws, Path(ns.out) / "bootstrap_replicates.csv")
    targets = {br.target: {"point": br.point, "ci95": br.ci95, "n_missing": br.n_missing} for br in res}
    _emit(ns, {"fit": _two_level_dict(point), "targets": targets, "ci_method": ns.ci, "B": ns.b},
          ["bootstrap_replicates.csv"])


def cmd_replicate(ns) -> None:
    if ns.kind == "table1":
        res = replicate_table1(ns.reps, ns.seed, jobs=ns.jobs)
    else:
        kind = "delta_sweep" if ns.kind == "two-level-bias" else "consistency"
        res = replicate_two_level(kind, ns.reps, ns.seed, methods=tuple(ns.methods), jobs=ns.jobs, N=ns.n)
    write_csv(res.rows, Path(ns.out) / "summary.csv")
    _emit(ns, {"kind": ns.kind, "rows": res.rows}, ["summary.csv"])


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "sensitivity": cmd_sensitivity,
    "bootstrap": cmd_bootstrap, "replicate": cmd_replicate,
}


# -- parser ------------------------------------------------------------------------


def _delta(text: str) -> float:
    v = float(text)
    if not -1.0 < v < 1.0:
        raise argparse.ArgumentTypeError("delta must lie in (-1, 1)")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gma", description="Granger mediation analysis for time series.")
    parser.add_argument("--version", action="version", version=f"gma {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, jobs=False, search=False):
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--input", required=True, help="dataset CSV (subject_id,t,z,m,r)")
            p.add_argument("--p", type=int, default=1, help="MAR lag order (default 1)")
            p.add_argument("--demean", action="store_true", help="remove per-subject means of z, m, r")
        if jobs:
            p.add_argument("--jobs", type=_positive_int, default=default_jobs(),
                           help="worker processes (default $GMA_JOBS or 1)")
        if search:
            p.add_argument("--delta-lo", type=_delta, default=-0.95)
            p.add_argument("--delta-hi", type=_delta, default=0.95)
            p.add_argument("--n-grid", type=int, default=21)

    p = sub.add_parser("simulate", help="generate synthetic datasets")
    p.add_argument("--scenario", choices=("table1", "two-level"), required=True)
    p.add_argument("--delta", type=_delta, default=0.5)
    p.add_argument("--n", type=_positive_int, default=50, help="subjects (two-level)")
    p.add_argument("--t", type=_positive_int, default=100, help="series length, or Poisson mean (two-level)")
    p.add_argument("--fixed-t", action="store_true", help="use exactly --t points per subject")
    p.add_argument("--sigma2-spread", type=float, default=0.0,
                   help="log-SD of per-subject outcome noise scales (two-level)")
    p.add_argument("--reps", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    common(p, data=False)

    p = sub.add_parser("fit", help="fit a single- or multi-level model")
    p.add_argument("--level", choices=("single", "multi"), required=True)
    p.add_argument("--method", choices=("ts", "bcd"), default="ts")
    p.add_argument("--delta", type=_delta, default=None, help="required for --level single")
    common(p, search=True)

    p = sub.add_parser("sensitivity", help="single-level estimates over a delta grid")
    p.add_argument("--grid", type=parse_grid, default=parse_grid("-0.9:0.9:0.1"), help="LO:HI:STEP")
    common(p)

    p = sub.add_parser("bootstrap", help="participant bootstrap of the two-level fit")
    p.add_argument("--method", choices=("ts", "bcd"), default="ts")
    p.add_argument("--b", type=int, default=200, help="bootstrap replicates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ci", choices=("percentile", "normal"), default="percentile")
    common(p, jobs=True, search=True)

    p = sub.add_parser("replicate", help="Monte-Carlo replication studies")
    p.add_argument("kind", choices=("table1", "two-level-bias", "consistency"))
    p.add_argument("--reps", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=_positive_int, default=50, help="subjects for two-level-bias")
    p.add_argument("--methods", nargs="+", choices=("ts", "bcd"), default=["ts", "bcd"])
    common(p, data=False, jobs=True)

    p = sub.add_parser("rerun", help="repeat the run recorded in a result.json")
    p.add_argument("result", help="result.json written by an earlier run")
    p.add_argument("--out", default=None, help="output directory (default: the recorded one)")
    return parser


_DEFAULT_REPS = {"table1": 1000, "two-level-bias": 200, "consistency": 50}


def _validate(parser, ns) -> None:
    if ns.command == "fit" and ns.level == "single" and ns.delta is None:
        parser.error("fit --level single requires --delta (delta is not identified from one subject)")
    if ns.command == "replicate" and ns.reps is None:
        ns.reps = _DEFAULT_REPS[ns.kind]
    if ns.command == "bootstrap" and ns.b < 20:
        parser.error("--b must be at least 20")
    if getattr(ns, "p", 0) < 0:
        parser.error("--p must be non-negative")


def _error_module(exc: BaseException) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    for frame in reversed(tb):
        path = Path(frame.filename)
        if path.parent.name == "gma":
            return _MODULE_NAMES.get(path.stem, path.stem)
    return "cli"


def _glue_negative_values(argv: list) -> list:
    """Let ``--grid -0.9:0.9:0.1`` through; argparse would read the value as a flag."""
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a in ("--grid", "--delta", "--delta-lo", "--delta-hi") and i + 1 < len(argv) \
                and argv[i + 1].startswith("-"):
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _glue_negative_values(list(sys.argv[1:] if argv is None else argv))
    try:
        ns = parser.parse_args(argv)
        _validate(parser, ns)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "rerun":
            doc = read_result(ns.result)
            cfg = dict(doc["config"])
            if ns.out is not None:
                cfg["out"] = ns.out
            ns = argparse.Namespace(**cfg)
        COMMANDS[ns.command](ns)
    except DataError as exc:
        print(f"gma: data error [{_error_module(exc)}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"gma: numerical failure [{_error_module(exc)}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GMAError as exc:
        print(f"gma: error [{_error_module(exc)}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
