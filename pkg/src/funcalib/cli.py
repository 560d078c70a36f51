"""Command-line front end: estimate, simulate, cv, and bench subcommands."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import estimators, simulate, variance as variance_mod
from .calibrate import (
    DEFAULT_XI1,
    DEFAULT_XI2,
    KL,
    KL_AS_WRITTEN,
    L2,
    build_problem,
    cross_validate,
    default_lambda_grids,
    rate_lambdas,
    solve_weights,
)
from .data import TwoSampleData
from .errors import ConfigError, FuncalibError, InputError
from .simulate import CSV_FIELDS, METHODS, PopulationSpec

log = logging.getLogger("funcalib")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERIC = 2


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration of one CLI invocation."""

    command: str
    sample_a: Optional[str] = None
    sample_b: Optional[str] = None
    pop_size: Optional[float] = None
    methods: Tuple[str, ...] = ()
    lambdas: object = "auto"
    xi1: float = DEFAULT_XI1
    xi2: float = DEFAULT_XI2
    kl_sign: str = KL_AS_WRITTEN
    bootstrap: int = 0
    reps: int = 0
    setup: str = simulate.LINEAR
    n_pop: int = 0
    n_a: int = 0
    n_b: int = 0
    seed: int = 0
    out: Optional[str] = None
    level: float = 0.95


def _parse_cell(value: str, row: int, column: str, path: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise InputError(
            f"{path}: non-numeric value {value!r} at row {row}, "
            f"column {column!r}"
        ) from None
    if not np.isfinite(out):
        raise InputError(
            f"{path}: non-finite value at row {row}, column {column!r}"
        )
    return out


def _read_csv(path: str, required: Sequence[str]) -> dict:
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from None
    with handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise InputError(f"{path}: missing column(s) {missing}")
        columns = {c: [] for c in required}
        for i, row in enumerate(reader, start=1):
            for c in required:
                columns[c].append(_parse_cell(row.get(c), i, c, path))
    if not columns[required[0]]:
        raise InputError(f"{path}: no data rows")
    return {c: np.asarray(v) for c, v in columns.items()}


def _covariate_names(path: str) -> List[str]:
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            header = next(csv.reader(handle), [])
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from None
    names = []
    k = 1
    while f"x{k}" in header:
        names.append(f"x{k}")
        k += 1
    if not names:
        raise InputError(f"{path}: expected covariate columns x1..xd")
    return names


def load_two_sample(
    path_a: str, path_b: str, n_pop: Optional[float] = None
) -> TwoSampleData:
    """Loads the two-sample input from CSV files.

    Sample A needs columns x1..xd and y; sample B needs x1..xd and pi_b
    with values in (0, 1]. When ``n_pop`` is omitted the population size
    is estimated by the sum of the reciprocal inclusion probabilities.

    Raises:
        InputError: missing columns, non-numeric cells (named by row and
            column), or inclusion probabilities outside (0, 1].
    """
    x_names = _covariate_names(path_a)
    a_cols = _read_csv(path_a, x_names + ["y"])
    b_cols = _read_csv(path_b, x_names + ["pi_b"])
    pi_b = b_cols["pi_b"]
    bad = np.nonzero((pi_b <= 0) | (pi_b > 1))[0]
    if bad.size:
        raise InputError(
            f"{path_b}: pi_b outside (0, 1] at row {int(bad[0]) + 1}, "
            "column 'pi_b'"
        )
    x_a = np.column_stack([a_cols[c] for c in x_names])
    x_b = np.column_stack([b_cols[c] for c in x_names])
    return TwoSampleData(
        x_a=x_a, y_a=a_cols["y"], x_b=x_b, d_b=1.0 / pi_b, n_pop=n_pop
    )


def _result_payload(res: estimators.EstimateResult) -> dict:
    payload = {
        "method": res.method,
        "estimate": res.estimate,
        "seconds": res.wall_time,
    }
    if res.variance is not None:
        payload["variance"] = res.variance
    if res.ci_low is not None and res.ci_high is not None:
        payload["ci"] = [res.ci_low, res.ci_high]
    if res.diagnostics:
        payload["diagnostics"] = res.diagnostics
    return payload


def _write_text(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as handle:
            handle.write(text)
    else:
        sys.stdout.write(text)


def _run_estimate(config: RunConfig) -> int:
    data = load_two_sample(config.sample_a, config.sample_b, config.pop_size)
    methods = config.methods or ("prop",)
    kwargs = dict(xi1=config.xi1, xi2=config.xi2, kl_sign=config.kl_sign)
    results = []
    for method in methods:
        if method == "nsm":
            res = estimators.nsm(data)
        elif method in ("ev1", "ev2"):
            res = estimators.ev_estimator(data, int(method[-1]))
        elif method in ("dr1", "dr2"):
            res = estimators.dr_estimator(data, int(method[-1]))
        elif method == "ht_kl":
            res = estimators.ht_kl(
                data, lambdas=config.lambdas, seed=config.seed, **kwargs
            )
            if config.bootstrap:
                lam = (res.diagnostics["lambda1"], res.diagnostics["lambda2"])
                bres = variance_mod.bootstrap_variance(
                    data, b_reps=config.bootstrap, seed=config.seed,
                    lambdas=lam, xi1=config.xi1, xi2=config.xi2,
                    kl_sign=config.kl_sign,
                )
                lo, hi = variance_mod.confidence_interval(
                    res.estimate, bres.variance, config.level
                )
                res = replace(res, variance=bres.variance,
                              ci_low=lo, ci_high=hi)
        elif method == "bss":
            res = estimators.bss(
                data, lambdas=config.lambdas, seed=config.seed, **kwargs
            )
        elif method == "prop":
            res = estimators.prop(
                data, lambdas=config.lambdas, seed=config.seed,
                level=config.level, **kwargs
            )
        else:
            raise ConfigError(f"unknown method {method!r}")
        if res.diagnostics:
            log.info("%s diagnostics: %s", method, res.diagnostics)
        results.append(_result_payload(res))
    _write_text(json.dumps(results, indent=2) + "\n", config.out)
    return EXIT_OK


def _spec_from_config(config: RunConfig) -> PopulationSpec:
    return PopulationSpec(
        setup=config.setup, n_pop=config.n_pop,
        n_a0=config.n_a, n_b0=config.n_b, seed=config.seed,
    )


def _run_simulate(config: RunConfig) -> int:
    spec = _spec_from_config(config)
    methods = config.methods or METHODS
    lambdas = None if config.lambdas == "auto" else config.lambdas
    records = simulate.monte_carlo(
        spec, methods, m_reps=config.reps or 1,
        bootstrap_reps=config.bootstrap or None,
        seed=config.seed, lambdas=lambdas, level=config.level,
    )
    lines = []
    for rec in records:
        lines.append({
            k: ("" if rec[k] is None else rec[k]) for k in CSV_FIELDS
        })
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS)
    writer.writeheader()
    writer.writerows(lines)
    _write_text(buf.getvalue(), config.out)
    summary = simulate.summarize(records)
    for method, stats in summary.items():
        log.info("%s: %s", method, stats)
    return EXIT_OK


def _run_cv(config: RunConfig) -> int:
    data = load_two_sample(config.sample_a, config.sample_b, config.pop_size)
    grid1, grid2 = default_lambda_grids(data.n_b)
    lam1, lam2 = cross_validate(
        data, grid1, grid2, seed=config.seed,
        bounds=(config.xi1, config.xi2), kl_sign=config.kl_sign,
    )
    _write_text(
        json.dumps({"lambda1": lam1, "lambda2": lam2}, indent=2) + "\n",
        config.out,
    )
    return EXIT_OK


def _run_bench(config: RunConfig) -> int:
    spec = _spec_from_config(config)
    pop = simulate.gen_population(spec)
    data = simulate.draw_samples(pop, seed=config.seed)
    lam = rate_lambdas(data.n_b)
    timings = {}

    t0 = time.perf_counter()
    problem = build_problem(data, lam[0], lam[1], penalty=KL,
                            bounds=(config.xi1, config.xi2),
                            kl_sign=config.kl_sign)
    timings["build_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    kl_sol = solve_weights(problem)
    timings["kl_solve_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    l2_sol = solve_weights(replace(problem, penalty=L2))
    timings["l2_solve_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    m_hat = estimators.kernel_ridge_fit(
        data.x_a, data.y_a, seed=config.seed,
        scaler=problem.design.scaler,
    )
    timings["ridge_seconds"] = time.perf_counter() - t0

    per_method = []
    methods = config.methods or METHODS
    for method in methods:
        t0 = time.perf_counter()
        if method == "nsm":
            est = estimators.nsm(data).estimate
        elif method in ("ev1", "ev2"):
            est = estimators.ev_estimator(data, int(method[-1])).estimate
        elif method in ("dr1", "dr2"):
            est = estimators.dr_estimator(data, int(method[-1])).estimate
        elif method == "ht_kl":
            est = float(kl_sol.weights @ data.y_a / data.n_pop)
            t0 -= timings["build_seconds"] + timings["kl_solve_seconds"]
        elif method == "bss":
            est = estimators.calibrated_estimate(data, l2_sol.weights, m_hat)
            t0 -= (timings["build_seconds"] + timings["l2_solve_seconds"]
                   + timings["ridge_seconds"])
        elif method == "prop":
            est = estimators.calibrated_estimate(data, kl_sol.weights, m_hat)
            t0 -= (timings["build_seconds"] + timings["kl_solve_seconds"]
                   + timings["ridge_seconds"])
        else:
            raise ConfigError(f"unknown method {method!r}")
        per_method.append({
            "method": method,
            "estimate": est,
            "seconds": time.perf_counter() - t0,
        })
    payload = {"sizes": [config.n_pop, config.n_a, config.n_b],
               "timings": timings, "methods": per_method}
    _write_text(json.dumps(payload, indent=2) + "\n", config.out)
    return EXIT_OK


def run(config: RunConfig) -> int:
    """Executes one command; returns the process exit code."""
    try:
        if config.command == "estimate":
            return _run_estimate(config)
        if config.command == "simulate":
            return _run_simulate(config)
        if config.command == "cv":
            return _run_cv(config)
        if config.command == "bench":
            return _run_bench(config)
        raise ConfigError(f"unknown command {config.command!r}")
    except (InputError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (FuncalibError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


def _lambda_value(raw: Optional[str]):
    if raw is None or raw == "auto":
        return "auto"
    try:
        return float(raw)
    except ValueError:
        raise InputError(f"lambda must be a number or 'auto', got {raw!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="funcalib",
        description="Calibration weighting for non-probability samples",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)
        p.add_argument("--xi1", type=float, default=DEFAULT_XI1)
        p.add_argument("--xi2", type=float, default=DEFAULT_XI2)
        p.add_argument("--kl-sign", choices=["as-written", "reversed"],
                       default=KL_AS_WRITTEN, dest="kl_sign")
        p.add_argument("--level", type=float, default=0.95)

    def add_data(p):
        p.add_argument("--sample-a", required=True, dest="sample_a")
        p.add_argument("--sample-b", required=True, dest="sample_b")
        p.add_argument("--pop-size", type=float, default=None,
                       dest="pop_size")

    def add_lambdas(p):
        p.add_argument("--lambda1", default=None)
        p.add_argument("--lambda2", default=None)

    def add_sim(p):
        p.add_argument("--setup", choices=[simulate.LINEAR,
                                           simulate.NONLINEAR],
                       default=simulate.LINEAR)
        p.add_argument("--n-pop", type=int, required=True, dest="n_pop")
        p.add_argument("--n-a", type=int, required=True, dest="n_a")
        p.add_argument("--n-b", type=int, required=True, dest="n_b")

    est = sub.add_parser("estimate", help="estimate the population mean")
    add_data(est)
    add_lambdas(est)
    add_common(est)
    est.add_argument("--method", action="append", choices=METHODS,
                     help="repeatable; default: prop")
    est.add_argument("--bootstrap", type=int, default=0,
                     help="bootstrap replicates for the ht_kl variance")

    sim = sub.add_parser("simulate", help="run the Monte Carlo comparison")
    add_sim(sim)
    add_lambdas(sim)
    add_common(sim)
    sim.add_argument("--method", action="append", choices=METHODS)
    sim.add_argument("--reps", type=int, default=1)
    sim.add_argument("--bootstrap", type=int, default=0)

    cv = sub.add_parser("cv", help="cross-validate the tuning parameters")
    add_data(cv)
    add_common(cv)

    bench = sub.add_parser("bench", help="time each estimator once")
    add_sim(bench)
    add_common(bench)
    bench.add_argument("--method", action="append", choices=METHODS)

    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    lam1 = _lambda_value(getattr(args, "lambda1", None))
    lam2 = _lambda_value(getattr(args, "lambda2", None))
    if lam1 == "auto" or lam2 == "auto":
        lambdas = "auto"
    else:
        lambdas = (lam1, lam2)
    return RunConfig(
        command=args.command,
        sample_a=getattr(args, "sample_a", None),
        sample_b=getattr(args, "sample_b", None),
        pop_size=getattr(args, "pop_size", None),
        methods=tuple(getattr(args, "method", None) or ()),
        lambdas=lambdas,
        xi1=args.xi1,
        xi2=args.xi2,
        kl_sign=args.kl_sign,
        bootstrap=getattr(args, "bootstrap", 0),
        reps=getattr(args, "reps", 0),
        setup=getattr(args, "setup", simulate.LINEAR),
        n_pop=getattr(args, "n_pop", 0),
        n_a=getattr(args, "n_a", 0),
        n_b=getattr(args, "n_b", 0),
        seed=args.seed,
        out=args.out,
        level=args.level,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = config_from_args(args)
    except InputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
