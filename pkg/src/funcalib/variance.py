"""Variance estimation: Poisson plug-in, weight bootstrap, and intervals."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from . import calibrate
from .calibrate import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    DEFAULT_XI1,
    DEFAULT_XI2,
    KL,
    KL_AS_WRITTEN,
    CalibrationProblem,
)
from .data import TwoSampleData
from .errors import ConfigError, InputError, NumericError
from .kernel import DEFAULT_EIGEN_CUTOFF

BOOTSTRAP_WEIGHT_FLOOR = 1e-8
MAX_DROP_FRACTION = 0.10


@dataclass(frozen=True)
class VarianceResult:
    """A variance estimate with its decomposition or replicate draws.

    For the plug-in estimator ``components`` holds (design_part,
    residual_part) and the variance is exactly their sum; for the
    bootstrap ``replicates`` holds the retained replicate estimates.
    """

    variance: float
    components: Optional[Tuple[float, float]] = None
    replicates: Optional[np.ndarray] = None
    n_dropped: int = 0
    n_clamped: int = 0

    def __post_init__(self):
        if self.variance < 0:
            raise InputError("variance must be nonnegative")


def plugin_variance_poisson(
    data: TwoSampleData,
    m_hat: Callable,
    weights: np.ndarray,
    sigma2_hat: float,
) -> VarianceResult:
    """Plug-in variance for the calibrated estimator under Poisson sampling.

    The design part is N^{-2} sum_B d^2 (1 - pi) m_hat(x)^2 with
    pi = 1/d; the residual part is sigma2_hat N^{-2} sum_A w^2.

    Raises:
        InputError: a design weight below 1 (implied pi above 1) or a
            negative residual variance.
    """
    if sigma2_hat < 0:
        raise InputError("sigma2_hat must be nonnegative")
    d = data.d_b
    if np.any(d < 1.0):
        raise InputError(
            "design weights below 1 imply inclusion probabilities above 1"
        )
    weights = np.asarray(weights, dtype=float).reshape(-1)
    pi = 1.0 / d
    m_b = np.asarray(m_hat(data.x_b), dtype=float).reshape(-1)
    n2 = data.n_pop**2
    design_part = float((d * d * (1.0 - pi) * m_b * m_b).sum() / n2)
    residual_part = float(sigma2_hat * (weights * weights).sum() / n2)
    return VarianceResult(
        variance=design_part + residual_part,
        components=(design_part, residual_part),
    )


def bootstrap_variance(
    data: TwoSampleData,
    estimator: str = "ht_kl",
    b_reps: int = 200,
    seed: int = 0,
    lambdas: Tuple[float, float] = None,
    xi1: float = DEFAULT_XI1,
    xi2: float = DEFAULT_XI2,
    kl_sign: str = KL_AS_WRITTEN,
    cutoff_ratio: float = DEFAULT_EIGEN_CUTOFF,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    problem: Optional[CalibrationProblem] = None,
    clamp_negative: bool = False,
) -> VarianceResult:
    """Bootstrap variance with normally perturbed B design weights.

    Each replicate draws d* ~ Normal(1/pi_B, (1 - pi_B)/pi_B^2)
    independently per B unit, re-solves the KL calibration with the same
    tuning parameters and the same all-ones start, and records the
    resulting HT estimate; the sample variance over replicates is
    returned.

    Negative draws are retained by default: the perturbation only
    reproduces the Poisson design variance if the normal draws are left
    intact (clamping shrinks every replicate's spread by a fixed factor,
    since the draw coefficient of variation is sqrt(1 - pi) whatever the
    scale). ``clamp_negative`` floors them at 1e-8 instead.

    Replicates whose solve fails are dropped; more than 10% dropped is an
    error.

    Args:
        lambdas: (lambda1, lambda2) pair from the original fit; required
            unless ``problem`` is given.
        problem: prebuilt calibration problem to reuse (skips the pooled
            design and spectrum stage).

    Raises:
        ConfigError: fewer than two replicates or an unsupported estimator.
        NumericError: more than 10% of replicates dropped.
    """
    if estimator != "ht_kl":
        raise ConfigError(f"unsupported bootstrap target {estimator!r}")
    if b_reps < 2:
        raise ConfigError("b_reps must be at least 2")
    if problem is None:
        if lambdas is None:
            raise ConfigError("lambdas are required without a prebuilt problem")
        lam1, lam2 = lambdas
        problem = calibrate.build_problem(
            data, lam1, lam2, penalty=KL, bounds=(xi1, xi2),
            kl_sign=kl_sign, cutoff_ratio=cutoff_ratio,
        )
    pi = 1.0 / data.d_b
    sd = np.sqrt(np.maximum(1.0 - pi, 0.0)) / pi
    rng = np.random.default_rng(seed)
    draws = rng.normal(loc=data.d_b, scale=sd, size=(b_reps, data.n_b))
    n_clamped = 0
    if clamp_negative:
        negative = draws < 0.0
        n_clamped = int(negative.sum())
        if n_clamped:
            warnings.warn(
                f"{n_clamped} bootstrap weight draw(s) were negative; "
                f"clamped to {BOOTSTRAP_WEIGHT_FLOOR}",
                stacklevel=2,
            )
            draws = np.where(negative, BOOTSTRAP_WEIGHT_FLOOR, draws)
    gamma, _, ok = calibrate.solve_weights_batch(
        problem, draws, max_iter=max_iter, tol=tol
    )
    slope = problem.weight_slope
    estimates = (1.0 + slope * gamma) @ data.y_a / problem.n_pop
    ok &= np.isfinite(estimates)
    n_dropped = int(b_reps - ok.sum())
    if n_dropped > MAX_DROP_FRACTION * b_reps:
        raise NumericError(
            f"{n_dropped} of {b_reps} bootstrap replicates failed"
        )
    kept = estimates[ok]
    return VarianceResult(
        variance=float(np.var(kept, ddof=1)),
        replicates=kept,
        n_dropped=n_dropped,
        n_clamped=n_clamped,
    )


# Acklam's rational approximation of the standard normal quantile,
# polished by one Halley step through erfc.
_ACKLAM_A = (
    -3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
    1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00,
)
_ACKLAM_B = (
    -5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
    6.680131188771972e+01, -1.328068155288572e+01,
)
_ACKLAM_C = (
    -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
    -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00,
)
_ACKLAM_D = (
    7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
    3.754408661907416e+00,
)


def normal_quantile(p: float) -> float:
    """Standard normal quantile by rational approximation.

    Accurate well beyond 1e-8 after the Halley refinement.

    Raises:
        ConfigError: p outside (0, 1).
    """
    if not 0.0 < p < 1.0:
        raise ConfigError(f"quantile level must be in (0, 1), got {p}")
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q
             + c[5]) / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p <= 1.0 - p_low:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r
             + a[5]) * q / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r
                             + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q
              + c[5]) / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def confidence_interval(
    estimate: float, variance: float, level: float = 0.95
) -> Tuple[float, float]:
    """Normal-theory interval estimate +/- z * sqrt(variance).

    Raises:
        ConfigError: level outside (0, 1).
        InputError: negative variance.
    """
    if not 0.0 < level < 1.0:
        raise ConfigError(f"level must be in (0, 1), got {level}")
    if variance < 0:
        raise InputError("variance must be nonnegative")
    z = normal_quantile(0.5 * (1.0 + level))
    half = z * math.sqrt(variance)
    return estimate - half, estimate + half
