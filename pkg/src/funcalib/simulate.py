"""Finite-population generation, sample draws, and the Monte Carlo harness."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from . import estimators, variance as variance_mod
from .calibrate import (
    DEFAULT_MAX_ITER,
    KL,
    L2,
    build_problem,
    rate_lambdas,
    solve_weights,
)
from .data import TwoSampleData
from .errors import ConfigError, FuncalibError, InputError, RescaleOverflowError

LINEAR = "linear"
NONLINEAR = "nonlinear"
METHODS = ("nsm", "ev1", "ev2", "dr1", "dr2", "ht_kl", "bss", "prop")

RECORD_FIELDS = (
    "replicate", "method", "estimate", "true_mean", "bias", "seconds",
    "variance", "ci_low", "ci_high", "covered", "error",
)

# serialized replicate streams drop the volatile timing field so a fixed
# seed reproduces the file byte for byte
CSV_FIELDS = tuple(f for f in RECORD_FIELDS if f != "seconds")


@dataclass(frozen=True)
class PopulationSpec:
    """Configuration of one simulated finite population."""

    setup: str
    n_pop: int
    n_a0: int
    n_b0: int
    seed: int = 0

    def __post_init__(self):
        if self.setup not in (LINEAR, NONLINEAR):
            raise ConfigError(f"unknown setup {self.setup!r}")
        if not 0 < self.n_b0 < self.n_a0 < self.n_pop:
            raise ConfigError(
                "sizes must satisfy 0 < n_b0 < n_a0 < n_pop, got "
                f"({self.n_pop}, {self.n_a0}, {self.n_b0})"
            )


@dataclass(frozen=True)
class FinitePopulation:
    """A generated finite population with its true sampling design.

    ``pi_a`` are the selection probabilities of the non-probability
    sample, ``pi_b`` the Poisson inclusion probabilities of the reference
    sample; both sum to their expected sample sizes.
    """

    x: np.ndarray
    y: np.ndarray
    m: np.ndarray
    pi_a: np.ndarray
    pi_b: np.ndarray
    ybar: float


def truncated_normal(rng, size=None, lo: float = -3.0, hi: float = 3.0):
    """Standard normal draws restricted to [lo, hi] by rejection."""
    if lo >= hi:
        raise ConfigError(f"need lo < hi, got ({lo}, {hi})")
    scalar = size is None
    n = 1 if scalar else int(size)
    out = rng.standard_normal(n)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return float(out[0]) if scalar else out


def beta33(rng, size=None):
    """Beta(3, 3) draws in (0, 1)."""
    return rng.beta(3.0, 3.0, size=size)


def _scale_probabilities(base: np.ndarray, target: float, what: str,
                         strict_below_one: bool) -> np.ndarray:
    probs = base * (target / base.sum())
    over = probs >= 1.0 if strict_below_one else probs > 1.0
    if over.any():
        raise RescaleOverflowError(
            f"{int(over.sum())} {what} probabilities crossed the unit "
            "bound after scaling"
        )
    return probs


def gen_population(spec: PopulationSpec) -> FinitePopulation:
    """Generates a finite population under the linear or nonlinear setup.

    Linear: covariates from centered Beta(3, 3) draws, mean function
    10 + 2 x1 + 2 x2, unit normal errors, selection proportional to
    m - min(m) + 0.25. Nonlinear: latent truncated normals mapped through
    |z| exp(-z) and |z| exp(z), mean function 3 + 2 z1 + z2, errors with
    standard deviation 0.5, selection expit(1 - 0.8 z1 - 0.8 z2)
    normalized to the expected size. Both setups take the reference-sample
    inclusion probabilities proportional to log(m - min(m) + 2).

    Raises:
        RescaleOverflowError: proportional scaling pushed a probability
            past 1 (the offending count is reported).
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_pop
    if spec.setup == LINEAR:
        xi = beta33(rng, size=(n, 2))
        z = 2.0 * (xi - 0.5)
        x1 = z[:, 0]
        x2 = 0.3 * x1 + z[:, 1]
        m = 10.0 + 2.0 * x1 + 2.0 * x2
        eps = rng.standard_normal(n)
        pi_a = _scale_probabilities(
            m - m.min() + 0.25, spec.n_a0, "selection", strict_below_one=True
        )
    else:
        z1 = truncated_normal(rng, size=n)
        z2 = truncated_normal(rng, size=n)
        x1 = np.abs(z1) * np.exp(-z1)
        x2 = np.abs(z2) * np.exp(z2)
        m = 3.0 + 2.0 * z1 + z2
        eps = 0.5 * rng.standard_normal(n)
        lin = expit(1.0 - 0.8 * z1 - 0.8 * z2)
        pi_a = _scale_probabilities(
            lin, spec.n_a0, "selection", strict_below_one=True
        )
    pi_b = _scale_probabilities(
        np.log(m - m.min() + 2.0), spec.n_b0, "inclusion",
        strict_below_one=False,
    )
    y = m + eps
    return FinitePopulation(
        x=np.column_stack([x1, x2]), y=y, m=m,
        pi_a=pi_a, pi_b=pi_b, ybar=float(y.mean()),
    )


def draw_samples(pop: FinitePopulation, seed: int = 0) -> TwoSampleData:
    """Draws samples A and B by independent Bernoulli selection.

    B follows Poisson sampling with the population's inclusion
    probabilities and carries their reciprocals as design weights. Draws
    leaving either sample with fewer than two rows are retried up to ten
    times.

    Raises:
        InputError: ten consecutive degenerate draws.
    """
    rng = np.random.default_rng(seed)
    n = pop.y.shape[0]
    for _ in range(10):
        sel_a = rng.random(n) < pop.pi_a
        sel_b = rng.random(n) < pop.pi_b
        if sel_a.sum() >= 2 and sel_b.sum() >= 2:
            return TwoSampleData(
                x_a=pop.x[sel_a],
                y_a=pop.y[sel_a],
                x_b=pop.x[sel_b],
                d_b=1.0 / pop.pi_b[sel_b],
                n_pop=float(n),
            )
    raise InputError("could not draw nonempty samples in 10 attempts")


def _child_seed(*entropy) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _blank_record(rep: int, method: str, true_mean: float) -> dict:
    rec = dict.fromkeys(RECORD_FIELDS)
    rec.update(replicate=rep, method=method, true_mean=true_mean, error="")
    return rec


def _run_replicate(
    spec: PopulationSpec,
    methods: Sequence[str],
    rep: int,
    seed: int,
    bootstrap_reps: Optional[int],
    lambdas: Optional[Tuple[float, float]],
    ridge_grid,
    level: float,
    max_iter: int,
) -> list:
    pop = gen_population(replace(spec, seed=_child_seed(seed, rep, 0)))
    data = draw_samples(pop, seed=_child_seed(seed, rep, 1))
    method_seed = _child_seed(seed, rep, 2)
    lam = rate_lambdas(data.n_b) if lambdas is None else lambdas
    records = []

    needs_kl = {"ht_kl", "prop"} & set(methods)
    needs_l2 = "bss" in methods
    needs_m = {"prop", "bss"} & set(methods)
    problem_kl = kl_sol = l2_sol = m_hat = None
    t_build = t_kl = t_l2 = t_m = 0.0
    try:
        if needs_kl or needs_l2:
            t0 = time.perf_counter()
            problem_kl = build_problem(data, lam[0], lam[1], penalty=KL)
            t_build = time.perf_counter() - t0
        if needs_kl:
            t0 = time.perf_counter()
            kl_sol = solve_weights(problem_kl, max_iter=max_iter)
            t_kl = time.perf_counter() - t0
        if needs_l2:
            t0 = time.perf_counter()
            l2_sol = solve_weights(replace(problem_kl, penalty=L2),
                                   max_iter=max_iter)
            t_l2 = time.perf_counter() - t0
        if needs_m:
            t0 = time.perf_counter()
            m_hat = estimators.kernel_ridge_fit(
                data.x_a, data.y_a, ridge_grid=ridge_grid,
                seed=method_seed, scaler=problem_kl.design.scaler,
            )
            t_m = time.perf_counter() - t0
        shared_error = None
    except FuncalibError as exc:
        shared_error = f"{type(exc).__name__}: {exc}"

    for method in methods:
        rec = _blank_record(rep, method, pop.ybar)
        try:
            if method in ("ht_kl", "bss", "prop") and shared_error:
                raise FuncalibError(shared_error)
            t0 = time.perf_counter()
            if method == "nsm":
                rec["estimate"] = estimators.nsm(data).estimate
            elif method in ("ev1", "ev2"):
                rec["estimate"] = estimators.ev_estimator(
                    data, int(method[-1])
                ).estimate
            elif method in ("dr1", "dr2"):
                rec["estimate"] = estimators.dr_estimator(
                    data, int(method[-1])
                ).estimate
            elif method == "ht_kl":
                rec["estimate"] = float(
                    kl_sol.weights @ data.y_a / data.n_pop
                )
                rec["seconds"] = t_build + t_kl
                if bootstrap_reps:
                    bres = variance_mod.bootstrap_variance(
                        data, b_reps=bootstrap_reps,
                        seed=_child_seed(seed, rep, 3),
                        problem=problem_kl, max_iter=max_iter,
                    )
                    rec["variance"] = bres.variance
            elif method == "bss":
                rec["estimate"] = estimators.calibrated_estimate(
                    data, l2_sol.weights, m_hat
                )
                rec["seconds"] = t_build + t_l2 + t_m
            elif method == "prop":
                rec["estimate"] = estimators.calibrated_estimate(
                    data, kl_sol.weights, m_hat
                )
                resid = data.y_a - np.asarray(m_hat(data.x_a)).reshape(-1)
                vres = variance_mod.plugin_variance_poisson(
                    data, m_hat, kl_sol.weights, float(np.var(resid, ddof=1))
                )
                rec["variance"] = vres.variance
                lo, hi = variance_mod.confidence_interval(
                    rec["estimate"], vres.variance, level
                )
                rec["ci_low"], rec["ci_high"] = lo, hi
                rec["covered"] = int(lo <= pop.ybar <= hi)
                rec["seconds"] = t_build + t_kl + t_m + (
                    time.perf_counter() - t0
                )
            else:  # pragma: no cover - validated upstream
                raise ConfigError(f"unknown method {method!r}")
            if rec["seconds"] is None:
                rec["seconds"] = time.perf_counter() - t0
            rec["bias"] = rec["estimate"] - pop.ybar
        except (FuncalibError, np.linalg.LinAlgError) as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
        records.append(rec)
    return records


def monte_carlo(
    spec: PopulationSpec,
    methods: Sequence[str],
    m_reps: int,
    bootstrap_reps: Optional[int] = None,
    seed: int = 0,
    lambdas: Optional[Tuple[float, float]] = None,
    ridge_grid=None,
    level: float = 0.95,
    max_iter: int = None,
) -> list:
    """Runs the replicated comparison and returns flat per-method records.

    Each replicate regenerates the population and both samples from
    substreams derived from (seed, replicate), so the output is a pure
    function of the arguments and is independent of any scheduling. The
    tuning pair defaults to the 1/n_B rate; heavy stages (pooled spectrum,
    ratio solves, outcome model) are shared across the calibration-based
    methods within a replicate and each method's ``seconds`` field sums
    the stages that method needs.

    Per-method failures are recorded in the ``error`` field and the run
    continues. ``bootstrap_reps`` attaches a bootstrap variance to the
    ht_kl records.
    """
    if m_reps < 1:
        raise ConfigError("m_reps must be at least 1")
    methods = list(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown methods: {sorted(unknown)}")
    if max_iter is None:
        max_iter = DEFAULT_MAX_ITER
    records = []
    for rep in range(m_reps):
        records.extend(
            _run_replicate(spec, methods, rep, seed, bootstrap_reps,
                           lambdas, ridge_grid, level, max_iter)
        )
    return records


def summarize(records: Sequence[dict]) -> dict:
    """Per-method summary of a record stream.

    Returns a dict keyed by method with mean bias, Monte Carlo standard
    error of the mean bias, coverage when present, mean seconds, mean
    variance, failure counts, and a flag when more than 5% of the
    replicates failed.
    """
    out = {}
    methods = sorted({r["method"] for r in records})
    for method in methods:
        rows = [r for r in records if r["method"] == method]
        ok = [r for r in rows if not r["error"]]
        biases = np.array([r["bias"] for r in ok], dtype=float)
        summary = {
            "n": len(rows),
            "n_ok": len(ok),
            "n_failed": len(rows) - len(ok),
            "flagged": (len(rows) - len(ok)) > 0.05 * len(rows),
            "mean_bias": float(biases.mean()) if biases.size else float("nan"),
            "mc_se": (
                float(biases.std(ddof=1) / np.sqrt(biases.size))
                if biases.size > 1 else float("nan")
            ),
            "mean_seconds": float(np.mean(
                [r["seconds"] for r in ok if r["seconds"] is not None]
            )) if ok else float("nan"),
        }
        covered = [r["covered"] for r in ok if r["covered"] is not None]
        if covered:
            summary["coverage"] = float(np.mean(covered))
        variances = [r["variance"] for r in ok if r["variance"] is not None]
        if variances:
            summary["mean_variance"] = float(np.mean(variances))
        out[method] = summary
    return out
