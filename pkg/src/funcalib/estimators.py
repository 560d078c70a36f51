"""Point estimators of the population mean compared in the simulations.

Covers the naive sample mean, quasi-randomization weighting (EV1/EV2),
parametric doubly robust estimation (DR1/DR2), the KL-penalized
calibration HT estimator, its squared-penalty variant (BSS), and the
calibrated estimator combining design-weighted predictions with weighted
residuals (Prop), plus the regression helpers they need.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from . import calibrate, variance as variance_mod
from .calibrate import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    DEFAULT_XI1,
    DEFAULT_XI2,
    KL,
    KL_AS_WRITTEN,
    L2,
    CalibrationProblem,
    WeightSolution,
    build_problem,
    cross_validate,
    default_lambda_grids,
    solve_weights,
)
from .data import TwoSampleData
from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateScaleError,
    InputError,
    NumericError,
    SeparationError,
    ShapeError,
    SingularityError,
)
from .kernel import DEFAULT_EIGEN_CUTOFF, gram_cross

LambdaSpec = Union[str, Tuple[float, float]]

DEFAULT_RIDGE_GRID = np.logspace(-10.0, -1.0, 10)
SEPARATION_BOUND = 30.0


@dataclass(frozen=True)
class EstimateResult:
    """A point estimate with optional variance, interval, and metadata."""

    method: str
    estimate: float
    variance: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    wall_time: float = 0.0
    diagnostics: Optional[dict] = None

    def __post_init__(self):
        if self.variance is not None and self.variance < 0:
            raise InputError("variance must be nonnegative")
        if self.ci_low is not None and self.ci_high is not None:
            if not (self.ci_low <= self.estimate <= self.ci_high):
                raise InputError("interval must bracket the estimate")


def nsm(data: TwoSampleData) -> EstimateResult:
    """Naive mean of the A-sample responses."""
    t0 = time.perf_counter()
    est = float(np.mean(data.y_a))
    return EstimateResult("nsm", est, wall_time=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Regression helpers
# ---------------------------------------------------------------------------


def _add_intercept(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.column_stack([np.ones(x.shape[0]), x])


def _ols_coefs(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least squares with an intercept column; returns (intercept, slopes)."""
    xb = _add_intercept(x)
    coefs, *_ = np.linalg.lstsq(xb, np.asarray(y, dtype=float), rcond=None)
    return coefs


def fit_logistic(
    x: np.ndarray,
    labels: np.ndarray,
    sample_weight: Optional[np.ndarray] = None,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> np.ndarray:
    """Logistic regression by Newton-Raphson.

    An intercept column is appended internally; the returned coefficient
    vector starts with the intercept. Convergence requires the score
    infinity-norm to fall below ``tol`` times the (weighted) sample size.

    Raises:
        InputError: labels not in {0, 1}.
        SeparationError: a coefficient exceeded 30 in absolute value, or
            the iteration failed to converge (both symptoms of separation).
        SingularityError: singular Hessian.
    """
    labels = np.asarray(labels, dtype=float).reshape(-1)
    if not np.all(np.isin(labels, (0.0, 1.0))):
        raise InputError("labels must be 0 or 1")
    if labels.min() == labels.max():
        raise SeparationError("labels are all one class")
    xb = _add_intercept(x)
    if xb.shape[0] != labels.shape[0]:
        raise ShapeError("x and labels lengths differ")
    if sample_weight is None:
        sw = np.ones(labels.shape[0])
    else:
        sw = np.asarray(sample_weight, dtype=float).reshape(-1)
    scale = max(1.0, float(sw.sum()))
    theta = np.zeros(xb.shape[1])
    for _ in range(max_iter):
        p = expit(xb @ theta)
        score = xb.T @ (sw * (labels - p))
        if np.abs(score).max() <= tol * scale:
            return theta
        w = sw * p * (1.0 - p)
        hess = xb.T @ (w[:, None] * xb)
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError as exc:
            raise SingularityError("singular Hessian in logistic fit") from exc
        theta = theta + step
        if np.abs(theta).max() > SEPARATION_BOUND:
            raise SeparationError(
                "logistic coefficients diverged (|coef| > 30)"
            )
    raise SeparationError("logistic fit did not converge in 50 iterations")


def ev_estimator(data: TwoSampleData, version: int) -> EstimateResult:
    """Quasi-randomization estimator with regressed design weights.

    Design weights are predicted on A by an unweighted linear regression
    of d_B on x over B; a logistic fit on the pooled rows (label 1 for A)
    gives membership probabilities, and each A unit is weighted by the
    predicted design weight times its inverse membership odds. Version 1
    divides by the known N, version 2 self-normalizes by the weight
    total.

    Raises:
        ConfigError: version not 1 or 2.
        NumericError: a fitted membership probability reaches 1.
    """
    if version not in (1, 2):
        raise ConfigError(f"version must be 1 or 2, got {version}")
    t0 = time.perf_counter()
    coef = _ols_coefs(data.x_b, data.d_b)
    d_tilde = _add_intercept(data.x_a) @ coef
    n_clipped = int((d_tilde <= 0).sum())
    if n_clipped:
        warnings.warn(
            f"{n_clipped} regressed design weight(s) were nonpositive; "
            "clipped to 1",
            stacklevel=2,
        )
        d_tilde = np.where(d_tilde <= 0, 1.0, d_tilde)
    pooled = np.vstack([data.x_a, data.x_b])
    labels = np.concatenate([np.ones(data.n_a), np.zeros(data.n_b)])
    theta = fit_logistic(pooled, labels)
    p = expit(_add_intercept(data.x_a) @ theta)
    if np.any(p >= 1.0 - 1e-12) or np.any(p <= 1e-12):
        raise NumericError("membership probability at 0 or 1: odds overflow")
    # weight by the inverse A-membership odds: units overrepresented in A
    # relative to B are weighted down
    w_tilde = d_tilde * (1.0 - p) / p
    if version == 1:
        est = float(w_tilde @ data.y_a / data.n_pop)
    else:
        est = float(w_tilde @ data.y_a / w_tilde.sum())
    return EstimateResult(
        f"ev{version}",
        est,
        wall_time=time.perf_counter() - t0,
        diagnostics={"n_clipped": n_clipped},
    )


def dr_theta(
    data: TwoSampleData, tol: float = 1e-8, max_iter: int = 50
) -> np.ndarray:
    """Selection-model coefficients from the pseudo-likelihood equation.

    Solves sum_A x_i = sum_B d_B expit(x_i' theta) x_i by Newton's method
    (intercept appended, returned first).

    Raises:
        SingularityError: singular Jacobian.
        ConvergenceError: no convergence within ``max_iter``.
    """
    xa = _add_intercept(data.x_a)
    xb = _add_intercept(data.x_b)
    target = xa.sum(axis=0)
    scale = max(1.0, float(np.abs(xa).max(axis=1).sum()))

    def residual(t):
        return target - xb.T @ (data.d_b * expit(xb @ t))

    theta = np.zeros(xa.shape[1])
    resid = residual(theta)
    for _ in range(max_iter):
        norm = np.abs(resid).max()
        if norm <= tol * scale:
            return theta
        p = expit(xb @ theta)
        w = data.d_b * p * (1.0 - p)
        jac = xb.T @ (w[:, None] * xb)
        try:
            step = np.linalg.solve(jac, resid)
        except np.linalg.LinAlgError as exc:
            raise SingularityError("singular Jacobian in theta solve") from exc
        # halve overshooting steps; the equation may have no interior root
        improved = False
        for _half in range(30):
            cand = theta + step
            cand_resid = residual(cand)
            if np.abs(cand_resid).max() < norm:
                theta, resid = cand, cand_resid
                improved = True
                break
            step = 0.5 * step
        if not improved:
            raise ConvergenceError(
                "selection-model equation appears to have no solution"
            )
    raise ConvergenceError("selection-model solve did not converge")


def dr_estimator(data: TwoSampleData, version: int) -> EstimateResult:
    """Doubly robust estimator with a linear outcome model.

    Version 1 uses the known N; version 2 replaces it with the estimated
    total of the fitted inverse selection probabilities.
    """
    if version not in (1, 2):
        raise ConfigError(f"version must be 1 or 2, got {version}")
    t0 = time.perf_counter()
    theta = dr_theta(data)
    pi_a = expit(_add_intercept(data.x_a) @ theta)
    beta = _ols_coefs(data.x_a, data.y_a)
    m_a = _add_intercept(data.x_a) @ beta
    m_b = _add_intercept(data.x_b) @ beta
    inv_pi = 1.0 / pi_a
    denom = data.n_pop if version == 1 else float(inv_pi.sum())
    est = float(
        (inv_pi @ (data.y_a - m_a) + data.d_b @ m_b) / denom
    )
    return EstimateResult(
        f"dr{version}", est, wall_time=time.perf_counter() - t0
    )


# ---------------------------------------------------------------------------
# Kernel ridge regression for the outcome model
# ---------------------------------------------------------------------------


class KernelRidgeModel:
    """Fitted kernel ridge predictor in the tensor Sobolev RKHS.

    Calling the model on raw covariate rows applies the stored min-max
    scaler (clipping new points into the unit cube) and evaluates
    sum_j alpha_j K(x_j, .).
    """

    def __init__(self, scaler: np.ndarray, points: np.ndarray,
                 alpha: np.ndarray, ridge: float):
        self.scaler = scaler
        self.points = points
        self.alpha = alpha
        self.ridge = ridge

    def __call__(self, raw_x) -> np.ndarray:
        raw_x = np.atleast_2d(np.asarray(raw_x, dtype=float))
        lo = self.scaler[:, 0]
        span = self.scaler[:, 1] - self.scaler[:, 0]
        pts = np.clip((raw_x - lo) / span, 0.0, 1.0)
        return gram_cross(pts, self.points) @ self.alpha


def _fit_scaler(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    if np.any(hi - lo <= 0):
        raise DegenerateScaleError("constant covariate column")
    return np.column_stack([lo, hi])


def kernel_ridge_fit(
    x: np.ndarray,
    y: np.ndarray,
    ridge_grid: Optional[Sequence[float]] = None,
    folds: int = 5,
    seed: int = 0,
    scaler: Optional[np.ndarray] = None,
) -> KernelRidgeModel:
    """Kernel ridge regression with the ridge chosen by k-fold CV.

    Fits alpha = (M + n rho I)^{-1} y on min-max scaled inputs, picking
    rho from ``ridge_grid`` by mean held-out squared error (ties go to the
    smaller rho). ``scaler`` overrides the per-column (min, max) pairs,
    letting callers scale with a pooled range wider than ``x`` itself.

    Raises:
        ConfigError: fewer rows than folds or an empty grid.
        NumericError: the regularized system is singular.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    n = x.shape[0]
    if n != y.shape[0]:
        raise ShapeError("x and y lengths differ")
    if n < folds:
        raise ConfigError(f"need at least {folds} rows, got {n}")
    grid = np.sort(np.asarray(
        DEFAULT_RIDGE_GRID if ridge_grid is None else ridge_grid, dtype=float
    ).reshape(-1))
    if grid.size == 0 or np.any(grid < 0):
        raise ConfigError("ridge grid must be nonempty and nonnegative")
    sc = _fit_scaler(x) if scaler is None else np.asarray(scaler, dtype=float)
    lo = sc[:, 0]
    span = sc[:, 1] - sc[:, 0]
    pts = np.clip((x - lo) / span, 0.0, 1.0)
    gram = gram_cross(pts, pts)

    if grid.size > 1:
        rng = np.random.default_rng(seed)
        parts = np.array_split(rng.permutation(n), folds)
        mse = np.zeros(grid.size)
        for hold in parts:
            train = np.setdiff1d(np.arange(n), hold, assume_unique=False)
            g_tt = gram[np.ix_(train, train)]
            g_vt = gram[np.ix_(hold, train)]
            y_t = y[train]
            for k, rho in enumerate(grid):
                if not np.isfinite(mse[k]):
                    continue
                try:
                    alpha = _ridge_solve(g_tt, train.size * rho, y_t)
                except NumericError:
                    mse[k] = np.inf  # candidate below the factorizable range
                    continue
                err = g_vt @ alpha - y[hold]
                mse[k] += float(err @ err)
        if not np.isfinite(mse).any():
            raise NumericError("no ridge candidate could be factorized")
        best = grid[int(np.argmin(mse))]
    else:
        best = float(grid[0])
    alpha = _ridge_solve(gram, n * best, y)
    return KernelRidgeModel(sc, pts, alpha, float(best))


def _ridge_solve(gram: np.ndarray, shift: float, y: np.ndarray) -> np.ndarray:
    try:
        sys = gram + shift * np.eye(gram.shape[0])
        return cho_solve(cho_factor(sys), y)
    except np.linalg.LinAlgError as exc:
        raise NumericError("kernel ridge system is singular") from exc


# ---------------------------------------------------------------------------
# Calibration-weighted estimators
# ---------------------------------------------------------------------------


def _resolve_lambdas(
    data: TwoSampleData,
    lambdas: LambdaSpec,
    penalty: str,
    bounds,
    kl_sign: str,
    cutoff_ratio: float,
    seed: int,
) -> Tuple[float, float]:
    if isinstance(lambdas, str):
        if lambdas != "auto":
            raise ConfigError(f"unknown lambda spec {lambdas!r}")
        grid1, grid2 = default_lambda_grids(data.n_b)
        return cross_validate(
            data, grid1, grid2, seed=seed, penalty=penalty,
            bounds=bounds, kl_sign=kl_sign, cutoff_ratio=cutoff_ratio,
        )
    lam1, lam2 = lambdas
    return float(lam1), float(lam2)


def fit_calibration(
    data: TwoSampleData,
    penalty: str = KL,
    lambdas: LambdaSpec = "auto",
    xi1: float = DEFAULT_XI1,
    xi2: float = DEFAULT_XI2,
    kl_sign: str = KL_AS_WRITTEN,
    c_n: Optional[float] = None,
    cutoff_ratio: float = DEFAULT_EIGEN_CUTOFF,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
    problem: Optional[CalibrationProblem] = None,
) -> Tuple[WeightSolution, CalibrationProblem]:
    """Fits calibration weights, building the pooled problem if needed.

    ``c_n`` caps the upper ratio bound for the squared penalty variant;
    a prebuilt ``problem`` skips the design/spectrum stage (its penalty
    and lambdas are adopted as-is).
    """
    if problem is None:
        upper = xi2 if c_n is None else min(xi2, c_n)
        lam1, lam2 = _resolve_lambdas(
            data, lambdas, penalty, (xi1, upper), kl_sign, cutoff_ratio, seed
        )
        problem = build_problem(
            data, lam1, lam2, penalty=penalty, bounds=(xi1, upper),
            kl_sign=kl_sign, cutoff_ratio=cutoff_ratio,
        )
    solution = solve_weights(problem, max_iter=max_iter, tol=tol)
    return solution, problem


def _ht_from_solution(data: TwoSampleData, sol: WeightSolution) -> float:
    return float(sol.weights @ data.y_a / data.n_pop)


def _solver_diagnostics(sol: WeightSolution, problem) -> dict:
    return {
        "iterations": sol.iterations,
        "converged": sol.converged,
        "grad_norm": sol.grad_norm,
        "inner_value": sol.inner_value,
        "eigengap_warning": sol.eigengap_warning,
        "lambda1": problem.lambda1,
        "lambda2": problem.lambda2,
    }


def ht_kl(data: TwoSampleData, lambdas: LambdaSpec = "auto",
          **kwargs) -> EstimateResult:
    """HT-form estimator with KL-penalized calibration weights."""
    t0 = time.perf_counter()
    sol, problem = fit_calibration(data, penalty=KL, lambdas=lambdas, **kwargs)
    est = _ht_from_solution(data, sol)
    return EstimateResult(
        "ht_kl", est, wall_time=time.perf_counter() - t0,
        diagnostics=_solver_diagnostics(sol, problem),
    )


def calibrated_estimate(
    data: TwoSampleData, weights: np.ndarray, m_hat: Callable
) -> float:
    m_a = np.asarray(m_hat(data.x_a), dtype=float).reshape(-1)
    m_b = np.asarray(m_hat(data.x_b), dtype=float).reshape(-1)
    return float(
        (data.d_b @ m_b + weights @ (data.y_a - m_a)) / data.n_pop
    )


def prop(
    data: TwoSampleData,
    lambdas: LambdaSpec = "auto",
    ridge_grid: Optional[Sequence[float]] = None,
    seed: int = 0,
    m_hat: Optional[Callable] = None,
    level: float = 0.95,
    **kwargs,
) -> EstimateResult:
    """Calibrated estimator: design-weighted predictions plus weighted residuals.

    The outcome model is a kernel ridge fit on the A sample over the
    pooled covariate range (injectable through ``m_hat``). When every B
    design weight is at least 1 the Poisson plug-in variance and the
    normal-theory interval are attached.
    """
    t0 = time.perf_counter()
    sol, problem = fit_calibration(data, penalty=KL, lambdas=lambdas,
                                   seed=seed, **kwargs)
    if m_hat is None:
        scaler = problem.design.scaler if problem.design is not None else None
        m_hat = kernel_ridge_fit(
            data.x_a, data.y_a, ridge_grid=ridge_grid, seed=seed,
            scaler=scaler,
        )
    est = calibrated_estimate(data, sol.weights, m_hat)
    var = ci_low = ci_high = None
    if np.all(data.d_b >= 1.0):
        resid = data.y_a - np.asarray(m_hat(data.x_a), dtype=float).reshape(-1)
        sigma2 = float(np.var(resid, ddof=1))
        vres = variance_mod.plugin_variance_poisson(
            data, m_hat, sol.weights, sigma2
        )
        var = vres.variance
        ci_low, ci_high = variance_mod.confidence_interval(est, var, level)
    return EstimateResult(
        "prop", est, variance=var, ci_low=ci_low, ci_high=ci_high,
        wall_time=time.perf_counter() - t0,
        diagnostics=_solver_diagnostics(sol, problem),
    )


def bss(
    data: TwoSampleData,
    lambdas: LambdaSpec = "auto",
    ridge_grid: Optional[Sequence[float]] = None,
    seed: int = 0,
    m_hat: Optional[Callable] = None,
    c_n: Optional[float] = None,
    **kwargs,
) -> EstimateResult:
    """Squared-penalty balancing estimator in calibrated form.

    Identical to :func:`prop` except the ratio fit uses the squared-weight
    penalty and the upper ratio bound min(xi2, c_n).
    """
    t0 = time.perf_counter()
    sol, problem = fit_calibration(
        data, penalty=L2, lambdas=lambdas, c_n=c_n, seed=seed, **kwargs
    )
    if m_hat is None:
        scaler = problem.design.scaler if problem.design is not None else None
        m_hat = kernel_ridge_fit(
            data.x_a, data.y_a, ridge_grid=ridge_grid, seed=seed,
            scaler=scaler,
        )
    est = calibrated_estimate(data, sol.weights, m_hat)
    return EstimateResult(
        "bss", est, wall_time=time.perf_counter() - t0,
        diagnostics=_solver_diagnostics(sol, problem),
    )
