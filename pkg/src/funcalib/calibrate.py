"""Penalized min-max calibration of density ratios on the A sample.

Solves, over the box [xi1, xi2]^{n_A},

    minimize  sup_u { S(gamma, u) / ||u||_2^2 - lambda1 ||u||_H^2 / ||u||_2^2 }
              + penalty(gamma)

where S(gamma, u) is the squared discrepancy between the ratio-weighted
A-sample mean and the design-weighted B-sample mean of u over the pooled
design, and the sup runs over the tensor Sobolev RKHS. With the truncated
Gram spectrum M ~ P1 diag(Q1) P1^T, the inner sup equals the largest
eigenvalue of

    B(gamma) = (n / N^2) v v^T - n lambda1 diag(1/Q1),   v = P1^T w(gamma),

a rank-one update of a diagonal matrix, found by solving its secular
equation. The outer problem runs projected gradient descent with Armijo
backtracking. The penalty is either the sample KL term
n_A^{-1} sum r (log r - 1) + 1 (subtracted, as the objective is written,
with an optional sign switch) or the squared-weight term
n_A^{-1} sum {1 + (N/n_A - 1) r}^2 (added).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .data import TwoSampleData
from .errors import (
    ConfigError,
    ContractError,
    DegenerateSpectrumError,
    DomainError,
    InitializationError,
    InputError,
    ShapeError,
)
from .kernel import (
    DEFAULT_EIGEN_CUTOFF,
    GramSpectrum,
    ScaledDesign,
    eigendecompose,
    gram_matrix,
    minmax_scale,
)

DEFAULT_XI1 = 1e-8
DEFAULT_XI2 = 1e8
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 500
ARMIJO_SHRINK = 0.5
ARMIJO_SLOPE = 1e-4
ARMIJO_INIT_STEP = 1.0
EIGENGAP_RTOL = 1e-10
SECULAR_RTOL = 1e-13

KL = "kl"
L2 = "l2"
KL_AS_WRITTEN = "as-written"
KL_REVERSED = "reversed"


@dataclass(frozen=True)
class CalibrationProblem:
    """One calibration instance over a pooled scaled design.

    Attributes:
        spectrum: truncated spectrum of the pooled Gram matrix.
        a_rows: design-row index of each A unit (length n_A).
        b_rows: design-row index of each B unit (length n_B).
        d_b: B design weights 1/pi_B (length n_B).
        n_pop: population size N (known or estimated).
        lambda1: smoothness tuning parameter, positive.
        lambda2: penalty tuning parameter, nonnegative.
        penalty: "kl" or "l2".
        bounds: (xi1, xi2) box for the ratios, 0 < xi1 <= 1 <= xi2.
        kl_sign: "as-written" subtracts the KL term from the objective,
            "reversed" adds it.
        design: optional ScaledDesign kept for downstream reuse.
    """

    spectrum: GramSpectrum
    a_rows: np.ndarray
    b_rows: np.ndarray
    d_b: np.ndarray
    n_pop: float
    lambda1: float
    lambda2: float
    penalty: str = KL
    bounds: Tuple[float, float] = (DEFAULT_XI1, DEFAULT_XI2)
    kl_sign: str = KL_AS_WRITTEN
    design: Optional[ScaledDesign] = field(default=None, compare=False)

    def __post_init__(self):
        a_rows = np.asarray(self.a_rows, dtype=np.intp).reshape(-1)
        b_rows = np.asarray(self.b_rows, dtype=np.intp).reshape(-1)
        d_b = np.asarray(self.d_b, dtype=float).reshape(-1)
        object.__setattr__(self, "a_rows", a_rows)
        object.__setattr__(self, "b_rows", b_rows)
        object.__setattr__(self, "d_b", d_b)
        n = self.spectrum.P1.shape[0]
        if b_rows.shape[0] != d_b.shape[0]:
            raise ShapeError("b_rows and d_b lengths differ")
        tagged = np.zeros(n, dtype=bool)
        tagged[a_rows] = True
        tagged[b_rows] = True
        if not tagged.all():
            raise InputError("every design row needs an A or B origin tag")
        if np.any(d_b <= 0):
            raise InputError("design weights must be positive")
        if self.lambda1 <= 0:
            raise ConfigError(f"lambda1 must be positive, got {self.lambda1}")
        if self.lambda2 < 0:
            raise ConfigError(f"lambda2 must be nonnegative, got {self.lambda2}")
        xi1, xi2 = self.bounds
        if not (0 < xi1 <= 1 <= xi2):
            raise ConfigError(
                f"bounds must satisfy 0 < xi1 <= 1 <= xi2, got {self.bounds}"
            )
        if self.penalty not in (KL, L2):
            raise ConfigError(f"unknown penalty {self.penalty!r}")
        if self.kl_sign not in (KL_AS_WRITTEN, KL_REVERSED):
            raise ConfigError(f"unknown kl_sign {self.kl_sign!r}")
        if self.n_pop < self.n_a:
            raise InputError(
                f"population size {self.n_pop} below sample size {self.n_a}"
            )

    @property
    def n_rows(self) -> int:
        return self.spectrum.P1.shape[0]

    @property
    def n_a(self) -> int:
        return self.a_rows.shape[0]

    @property
    def weight_slope(self) -> float:
        """Factor N/n_A - 1 mapping ratios to weights."""
        return self.n_pop / self.n_a - 1.0


@dataclass(frozen=True)
class WeightSolution:
    """Fitted ratios and weights plus solver diagnostics.

    ``weights`` is 1 + (N/n_A - 1) * gamma elementwise; ``objective_trace``
    holds the objective at the initial point and after every accepted step
    and is nonincreasing by construction.
    """

    gamma: np.ndarray
    weights: np.ndarray
    inner_value: float
    objective_trace: np.ndarray
    iterations: int
    converged: bool
    grad_norm: float
    eigengap_warning: bool = False


class Objective(NamedTuple):
    value: float
    grad: np.ndarray
    eigengap_warning: bool


def build_problem(
    data: TwoSampleData,
    lambda1: float,
    lambda2: float,
    penalty: str = KL,
    bounds: Tuple[float, float] = (DEFAULT_XI1, DEFAULT_XI2),
    kl_sign: str = KL_AS_WRITTEN,
    cutoff_ratio: float = DEFAULT_EIGEN_CUTOFF,
) -> CalibrationProblem:
    """Scales the pooled covariates and assembles a CalibrationProblem."""
    design = minmax_scale(data.x_a, data.x_b)
    spectrum = eigendecompose(gram_matrix(design), cutoff_ratio)
    return CalibrationProblem(
        spectrum=spectrum,
        a_rows=design.a_rows,
        b_rows=design.b_rows,
        d_b=data.d_b,
        n_pop=data.n_pop,
        lambda1=lambda1,
        lambda2=lambda2,
        penalty=penalty,
        bounds=bounds,
        kl_sign=kl_sign,
        design=design,
    )


def discrepancy_vector(
    problem: CalibrationProblem, gamma: np.ndarray
) -> np.ndarray:
    """Pooled-row weight vector w(gamma) entering the balance term.

    A-tagged rows contribute 1 + (N/n_A - 1) gamma_i, B-tagged rows
    contribute -d_B; rows carrying both tags receive the sum.
    """
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if gamma.shape[0] != problem.n_a:
        raise ShapeError(
            f"gamma length {gamma.shape[0]} != n_A {problem.n_a}"
        )
    w = np.zeros(problem.n_rows)
    np.add.at(w, problem.a_rows, 1.0 + problem.weight_slope * gamma)
    np.add.at(w, problem.b_rows, -problem.d_b)
    return w


def kl_penalty(gamma: np.ndarray, n_a: int) -> float:
    """Sample KL penalty n_A^{-1} sum r (log r - 1) + 1.

    Raises:
        DomainError: if any ratio is nonpositive.
    """
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if np.any(gamma <= 0):
        raise DomainError("KL penalty requires strictly positive ratios")
    return float((gamma * (np.log(gamma) - 1.0)).sum() / n_a + 1.0)


def l2_penalty(gamma: np.ndarray, n_a: int, n_pop: float) -> float:
    """Squared-weight penalty n_A^{-1} sum {1 + (N/n_A - 1) r}^2."""
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    w = 1.0 + (n_pop / n_a - 1.0) * gamma
    return float((w * w).sum() / n_a)


# ---------------------------------------------------------------------------
# Rank-one secular eigenvalue machinery
# ---------------------------------------------------------------------------


def secular_max_eig(d, v, rho: float) -> float:
    """Largest eigenvalue of diag(d) + rho * v v^T via its secular equation.

    Finds the largest root of 1 + rho * sum_i v_i^2 / (d_i - lam) = 0 on
    (d_1, d_1 + rho ||v||^2], with exact-zero entries of v deflated; the
    result can equal d_1 exactly when the corresponding v entry vanishes.

    Args:
        d: diagonal entries, nonincreasing.
        v: rank-one direction, same length as d.
        rho: positive scale of the rank-one term.

    Raises:
        ContractError: d not nonincreasing or rho not positive.
    """
    d = np.asarray(d, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    if d.shape != v.shape:
        raise ShapeError("d and v lengths differ")
    if rho <= 0:
        raise ContractError(f"rho must be positive, got {rho}")
    if np.any(np.diff(d) > 0):
        raise ContractError("d must be sorted nonincreasing")
    lam, _, _ = _largest_eig(d, v, rho)
    return lam


def _secular_newton(dk, v2k, rho, start, lo):
    """Monotone Newton from the right for the largest secular root.

    The secular function f(lam) = 1 + rho * sum v2 / (d - lam) is
    increasing and concave on (lo, inf), so Newton started at any point
    with f >= 0 descends monotonically onto the root; a bisection
    safeguard covers floating-point undershoot.
    """
    hi = start
    x = start
    scale = max(abs(dk[0]), abs(start), 1e-300)
    for _ in range(200):
        diff = dk - x
        terms = v2k / diff
        f = 1.0 + rho * terms.sum()
        if f < 0.0:
            # overshot to the left of the root: bisect back toward hi
            lo = x
            x = 0.5 * (x + hi)
            continue
        fp = rho * (terms / diff).sum()
        if fp <= 0.0 or not math.isfinite(fp):
            break
        step = f / fp
        x_new = x - step
        if x_new <= lo:
            x_new = 0.5 * (x + lo)
        if abs(x_new - x) <= SECULAR_RTOL * scale:
            x = x_new
            break
        hi = x
        x = x_new
    return x


def _largest_eig(d, v, rho, warm: Optional[float] = None):
    """Largest eigenpair of diag(d) + rho v v^T.

    Returns (lam, beta, root_is_secular). ``warm`` is a previous root used
    to shortcut the Newton iteration when still valid.
    """
    m = d.shape[0]
    v2 = v * v
    keep = v2 > 0.0
    if not keep.any():
        beta = np.zeros(m)
        beta[0] = 1.0
        return float(d[0]), beta, False
    dk = d[keep]
    v2k = v2[keep]
    top = float(dk[0])
    s = rho * float(v2k.sum())
    ub = top + s
    if ub <= top:
        # rank-one mass numerically zero
        root = top
    else:
        start = ub
        if warm is not None and top < warm <= ub:
            diff = dk - warm
            if np.all(diff < 0) and 1.0 + rho * (v2k / diff).sum() >= 0.0:
                start = warm
        root = _secular_newton(dk, v2k, rho, start, top)
    lam = root
    # a deflated diagonal entry can dominate the secular root
    if (~keep).any():
        d_un = d[~keep]
        d_un_max = float(d_un.max())
        if d_un_max >= root:
            idx = int(np.nonzero(~keep & (d == d_un_max))[0][0])
            beta = np.zeros(m)
            beta[idx] = 1.0
            return d_un_max, beta, False
    beta = np.zeros(m)
    denom = root - dk
    if np.all(denom > 0):
        beta[keep] = v[keep] / denom
        norm = np.linalg.norm(beta)
        if norm > 0 and np.all(np.isfinite(beta)):
            beta /= norm
        else:
            beta[:] = 0.0
            beta[int(np.argmax(keep))] = 1.0
    else:
        beta[int(np.argmax(keep))] = 1.0
    return float(lam), beta, True


def _interior_root(dk, v2k, rho):
    """Secular root in the open interval (dk[1], dk[0])."""
    lo, hi = float(dk[1]), float(dk[0])
    width = hi - lo
    if width <= 0:
        return lo
    x = 0.5 * (lo + hi)
    scale = max(abs(hi), width, 1e-300)
    for _ in range(200):
        diff = dk - x
        terms = v2k / diff
        f = 1.0 + rho * terms.sum()
        fp = rho * (terms / diff).sum()
        if f < 0.0:
            lo = x
        else:
            hi = x
        x_new = x - f / fp if fp > 0 else 0.5 * (lo + hi)
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= SECULAR_RTOL * scale:
            return x_new
        x = x_new
    return x


def _second_eig(d, v, rho):
    """Second-largest eigenvalue of diag(d) + rho v v^T.

    The eigenvalues are the deflated diagonal entries plus the secular
    roots of the kept block; the top two candidates of each family are
    merged and the runner-up returned.
    """
    v2 = v * v
    keep = v2 > 0.0
    cands = []
    if (~keep).any():
        d_un = np.sort(d[~keep])[::-1]
        cands.extend(float(x) for x in d_un[:2])
    dk = d[keep]
    v2k = v2[keep]
    if dk.shape[0] >= 1:
        top = float(dk[0])
        s = rho * float(v2k.sum())
        cands.append(_secular_newton(dk, v2k, rho, top + s, top))
    if dk.shape[0] >= 2:
        cands.append(float(_interior_root(dk, v2k, rho)))
    cands.sort(reverse=True)
    if len(cands) < 2:
        return -math.inf
    return cands[1]


def inner_value(
    problem: CalibrationProblem, gamma: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Largest eigenvalue and unit eigenvector of the reduced inner matrix.

    The matrix is (n/N^2) v v^T - n lambda1 diag(1/Q1) with
    v = P1^T w(gamma); its top eigenvalue equals the inner supremum of the
    calibration objective over the unit sphere.

    Raises:
        DegenerateSpectrumError: if the spectrum has rank zero.
    """
    if problem.spectrum.rank == 0:
        raise DegenerateSpectrumError("spectrum has rank zero")
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if gamma.shape[0] != problem.n_a:
        raise ShapeError(
            f"gamma length {gamma.shape[0]} != n_A {problem.n_a}"
        )
    prep = _prepare(problem)
    v = prep.v0 + prep.slope * (gamma @ prep.pa)
    lam, beta, _ = _largest_eig(prep.d, v, prep.rho)
    return lam, beta


# ---------------------------------------------------------------------------
# Objective, gradient, and the projected-gradient solver
# ---------------------------------------------------------------------------


class _Prepared(NamedTuple):
    """Cached arrays for repeated objective evaluations."""

    pa: np.ndarray        # (n_A, m) rows of P1 at the A origins
    v0: np.ndarray        # P1^T applied to the gamma-independent part of w
    d: np.ndarray         # -n lambda1 / Q1, nonincreasing
    rho: float            # n / N^2
    slope: float          # N / n_A - 1
    n_a: int
    lambda2: float
    penalty: str
    pen_sign: float       # multiplies the penalty inside the objective
    xi1: float
    xi2: float


def _prepare(problem: CalibrationProblem) -> _Prepared:
    spec = problem.spectrum
    n = problem.n_rows
    base = np.zeros(n)
    np.add.at(base, problem.a_rows, 1.0)
    np.add.at(base, problem.b_rows, -problem.d_b)
    if problem.penalty == KL:
        pen_sign = -1.0 if problem.kl_sign == KL_AS_WRITTEN else 1.0
    else:
        pen_sign = 1.0
    return _Prepared(
        pa=np.ascontiguousarray(spec.P1[problem.a_rows, :]),
        v0=spec.P1.T @ base,
        d=-n * problem.lambda1 / spec.Q1,
        rho=n / problem.n_pop**2,
        slope=problem.weight_slope,
        n_a=problem.n_a,
        lambda2=problem.lambda2,
        penalty=problem.penalty,
        pen_sign=pen_sign,
        xi1=problem.bounds[0],
        xi2=problem.bounds[1],
    )


def _penalty_value(prep: _Prepared, gamma: np.ndarray) -> float:
    if prep.lambda2 == 0.0:
        return 0.0
    if prep.penalty == KL:
        q = (gamma * (np.log(gamma) - 1.0)).sum() / prep.n_a + 1.0
    else:
        w = 1.0 + prep.slope * gamma
        q = (w * w).sum() / prep.n_a
    return prep.pen_sign * prep.lambda2 * q


def _penalty_grad(prep: _Prepared, gamma: np.ndarray) -> np.ndarray:
    if prep.lambda2 == 0.0:
        return np.zeros_like(gamma)
    if prep.penalty == KL:
        g = np.log(gamma) / prep.n_a
    else:
        g = 2.0 * prep.slope * (1.0 + prep.slope * gamma) / prep.n_a
    return prep.pen_sign * prep.lambda2 * g


def _value_state(prep: _Prepared, gamma: np.ndarray, warm=None):
    """Objective value plus the (v, lam, beta) state behind it."""
    v = prep.v0 + prep.slope * (gamma @ prep.pa)
    lam, beta, _ = _largest_eig(prep.d, v, prep.rho, warm=warm)
    value = lam + _penalty_value(prep, gamma)
    return value, lam, v, beta


def _grad_from_state(prep, gamma, v, lam, beta):
    g_inner = (2.0 * prep.rho * prep.slope * float(v @ beta)) * (prep.pa @ beta)
    return g_inner + _penalty_grad(prep, gamma)


def _gap_warning(prep, v, lam) -> bool:
    """Checks the top eigengap against EIGENGAP_RTOL * |lam|.

    Interlacing gives gap >= lam - d[0], so the exact second eigenvalue is
    only computed when that cheap bound is inconclusive.
    """
    thresh = EIGENGAP_RTOL * abs(lam)
    if lam - prep.d[0] >= thresh:
        return False
    lam2 = _second_eig(prep.d, v, prep.rho)
    return (lam - lam2) < thresh


def objective_and_grad(
    problem: CalibrationProblem, gamma: np.ndarray
) -> Objective:
    """Objective value and analytic gradient at gamma.

    The value is the inner eigenvalue plus the signed penalty term; the
    gradient combines the eigenvalue perturbation formula (valid when the
    top eigenvalue is simple) with the penalty derivative. A nearly
    degenerate top eigenpair sets ``eigengap_warning`` while still
    returning the subgradient.
    """
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if gamma.shape[0] != problem.n_a:
        raise ShapeError(
            f"gamma length {gamma.shape[0]} != n_A {problem.n_a}"
        )
    if problem.penalty == KL and np.any(gamma <= 0):
        raise DomainError("KL objective requires positive ratios")
    prep = _prepare(problem)
    value, lam, v, beta = _value_state(prep, gamma)
    grad = _grad_from_state(prep, gamma, v, lam, beta)
    return Objective(float(value), grad, _gap_warning(prep, v, lam))


def solve_weights(
    problem: CalibrationProblem,
    init: Optional[np.ndarray] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> WeightSolution:
    """Projected gradient descent over the ratio box.

    Runs Armijo backtracking (shrink 0.5, slope factor 1e-4, initial step
    1.0) from ``init`` (all ones by default) and stops when the projected
    gradient infinity-norm drops below ``tol`` or after ``max_iter``
    accepted steps. The objective trace is nonincreasing by construction.

    Raises:
        InitializationError: init outside the box or non-finite objective
            at the initial point.
    """
    prep = _prepare(problem)
    xi1, xi2 = prep.xi1, prep.xi2
    if init is None:
        x = np.ones(prep.n_a)
    else:
        x = np.asarray(init, dtype=float).reshape(-1).copy()
        if x.shape[0] != prep.n_a:
            raise ShapeError(f"init length {x.shape[0]} != n_A {prep.n_a}")
        if np.any(x < xi1) or np.any(x > xi2):
            raise InitializationError("init violates the ratio bounds")
    f, lam, v, beta = _value_state(prep, x)
    if not math.isfinite(f):
        raise InitializationError("objective not finite at the initial point")
    warned = _gap_warning(prep, v, lam)
    trace = [f]
    g = _grad_from_state(prep, x, v, lam, beta)
    iterations = 0
    converged = False
    warm = lam
    for _ in range(max_iter):
        pg = x - np.clip(x - g, xi1, xi2)
        if np.abs(pg).max() < tol:
            converged = True
            break
        step = ARMIJO_INIT_STEP
        accepted = False
        while step >= 1e-20:
            x_new = np.clip(x - step * g, xi1, xi2)
            slope = float(g @ (x_new - x))
            if slope >= 0.0:
                break  # box blocks every descent direction along -g
            f_new, lam_new, v_new, beta_new = _value_state(
                prep, x_new, warm=warm
            )
            if f_new <= f + ARMIJO_SLOPE * slope:
                accepted = True
                break
            step *= ARMIJO_SHRINK
        if not accepted:
            break
        x, f, lam, v, beta = x_new, f_new, lam_new, v_new, beta_new
        warm = lam
        trace.append(f)
        iterations += 1
        g = _grad_from_state(prep, x, v, lam, beta)
        if not warned:
            warned = _gap_warning(prep, v, lam)
    pg = x - np.clip(x - g, xi1, xi2)
    grad_norm = float(np.abs(pg).max())
    if not converged and grad_norm < tol and iterations > 0:
        converged = True
    return WeightSolution(
        gamma=x,
        weights=1.0 + prep.slope * x,
        inner_value=float(lam),
        objective_trace=np.asarray(trace),
        iterations=iterations,
        converged=converged,
        grad_norm=grad_norm,
        eigengap_warning=warned,
    )


# ---------------------------------------------------------------------------
# Lockstep batched solver (bootstrap replicates share the spectrum)
# ---------------------------------------------------------------------------


def solve_weights_batch(
    problem: CalibrationProblem,
    d_b_batch: np.ndarray,
    init: Optional[np.ndarray] = None,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solves one calibration per row of ``d_b_batch`` in lockstep.

    Every replicate shares the pooled design and spectrum of ``problem``
    and differs only in the B design weights, so the per-iterate linear
    algebra batches into matrix products. Each row follows exactly the
    projected-gradient/Armijo rule of :func:`solve_weights`.

    Returns:
        (gamma, converged, ok): (B, n_A) fitted ratios, (B,) convergence
        flags, and (B,) validity flags (False when a replicate's objective
        was not finite at the start).
    """
    prep = _prepare(problem)
    d_b_batch = np.atleast_2d(np.asarray(d_b_batch, dtype=float))
    if d_b_batch.shape[1] != problem.d_b.shape[0]:
        raise ShapeError("d_b_batch columns must match len(d_b)")
    n_rep = d_b_batch.shape[0]
    spec = problem.spectrum
    n = problem.n_rows
    # per-replicate v0: base A part is shared, B part varies
    base_a = np.zeros(n)
    np.add.at(base_a, problem.a_rows, 1.0)
    v0_a = spec.P1.T @ base_a
    pb = spec.P1[problem.b_rows, :]
    v0 = v0_a[None, :] - d_b_batch @ pb            # (B, m)
    xi1, xi2 = prep.xi1, prep.xi2

    if init is None:
        x = np.ones((n_rep, prep.n_a))
    else:
        init = np.asarray(init, dtype=float).reshape(-1)
        if np.any(init < xi1) or np.any(init > xi2):
            raise InitializationError("init violates the ratio bounds")
        x = np.tile(init, (n_rep, 1))

    def batch_value(xmat, rows, warm):
        v = v0[rows] + prep.slope * (xmat @ prep.pa)    # (r, m)
        lam = _batch_largest(prep.d, v, prep.rho, warm)
        pen = _batch_penalty(prep, xmat)
        return lam + pen, lam, v

    def batch_grad(xmat, v, lam):
        denom = lam[:, None] - prep.d[None, :]
        small = denom <= 0
        if small.any():
            denom = np.where(small, np.inf, denom)
        beta = v / denom
        norms = np.linalg.norm(beta, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        beta /= norms
        coef = 2.0 * prep.rho * prep.slope * np.einsum("ij,ij->i", v, beta)
        g = coef[:, None] * (beta @ prep.pa.T)
        return g + _batch_penalty_grad(prep, xmat)

    all_rows = np.arange(n_rep)
    f, lam, v = batch_value(x, all_rows, None)
    ok = np.isfinite(f)
    active = ok.copy()
    converged = np.zeros(n_rep, dtype=bool)
    g = batch_grad(x, v, lam)
    warm = lam.copy()
    for _ in range(max_iter):
        if not active.any():
            break
        rows = np.nonzero(active)[0]
        xr = x[rows]
        gr = g[rows]
        pg = xr - np.clip(xr - gr, xi1, xi2)
        done = np.abs(pg).max(axis=1) < tol
        if done.any():
            converged[rows[done]] = True
            active[rows[done]] = False
            rows = rows[~done]
            if rows.size == 0:
                continue
            xr = x[rows]
            gr = g[rows]
        fr = f[rows]
        step = np.full(rows.shape[0], ARMIJO_INIT_STEP)
        pending = np.ones(rows.shape[0], dtype=bool)
        x_next = xr.copy()
        f_next = fr.copy()
        lam_next = lam[rows].copy()
        v_next = v[rows].copy()
        moved = np.zeros(rows.shape[0], dtype=bool)
        for _ls in range(80):
            if not pending.any():
                break
            idx = np.nonzero(pending)[0]
            x_try = np.clip(xr[idx] - step[idx, None] * gr[idx], xi1, xi2)
            slope = np.einsum("ij,ij->i", gr[idx], x_try - xr[idx])
            blocked = slope >= 0.0
            f_try, lam_try, v_try = batch_value(
                x_try, rows[idx], warm[rows[idx]]
            )
            accept = (~blocked) & (f_try <= fr[idx] + ARMIJO_SLOPE * slope)
            acc = idx[accept]
            x_next[acc] = x_try[accept]
            f_next[acc] = f_try[accept]
            lam_next[acc] = lam_try[accept]
            v_next[acc] = v_try[accept]
            moved[acc] = True
            pending[acc] = False
            pending[idx[blocked]] = False
            rest = idx[~accept & ~blocked]
            step[rest] *= ARMIJO_SHRINK
            pending[rest[step[rest] < 1e-20]] = False
        stalled = rows[~moved]
        active[stalled] = False
        adv = rows[moved]
        if adv.size:
            sel = moved.nonzero()[0]
            x[adv] = x_next[sel]
            f[adv] = f_next[sel]
            lam[adv] = lam_next[sel]
            v[adv] = v_next[sel]
            warm[adv] = lam_next[sel]
            g[adv] = batch_grad(x[adv], v[adv], lam[adv])
    return x, converged, ok


def _batch_penalty(prep: _Prepared, xmat: np.ndarray) -> np.ndarray:
    if prep.lambda2 == 0.0:
        return np.zeros(xmat.shape[0])
    if prep.penalty == KL:
        q = (xmat * (np.log(xmat) - 1.0)).sum(axis=1) / prep.n_a + 1.0
    else:
        w = 1.0 + prep.slope * xmat
        q = (w * w).sum(axis=1) / prep.n_a
    return prep.pen_sign * prep.lambda2 * q


def _batch_penalty_grad(prep: _Prepared, xmat: np.ndarray) -> np.ndarray:
    if prep.lambda2 == 0.0:
        return np.zeros_like(xmat)
    if prep.penalty == KL:
        g = np.log(xmat) / prep.n_a
    else:
        g = 2.0 * prep.slope * (1.0 + prep.slope * xmat) / prep.n_a
    return prep.pen_sign * prep.lambda2 * g


def _batch_largest(d, vmat, rho, warm=None):
    """Vectorized largest secular roots for rows of vmat.

    Exact-zero deflation is handled by masking; rows whose kept mass
    vanishes fall back to d[0]. Converged rows are sliced out of the
    Newton loop so the per-iteration work tracks the active set.
    """
    n_rep = vmat.shape[0]
    v2 = vmat * vmat
    kept = v2 > 0.0
    all_kept = bool(kept.all())
    any_kept = kept.any(axis=1) if not all_kept else np.ones(n_rep, bool)
    s = rho * v2.sum(axis=1)
    d0 = d[0]
    lam = np.where(any_kept, d0 + s, d0)
    if not all_kept:
        v2 = np.where(kept, v2, 0.0)

    def f_and_fp(rows, x):
        diff = d[None, :] - x[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = v2[rows] / diff
            if not all_kept:
                terms = np.where(kept[rows], terms, 0.0)
            f = 1.0 + rho * terms.sum(axis=1)
            fp = rho * (terms / diff).sum(axis=1)
        return f, fp

    # warm values still right of their root shortcut the iteration
    if warm is not None:
        cand_ok = (warm > d0) & (warm <= d0 + s) & any_kept
        if cand_ok.any():
            rows = np.nonzero(cand_ok)[0]
            fval, _ = f_and_fp(rows, warm[rows])
            lam[rows[fval >= 0.0]] = warm[rows[fval >= 0.0]]

    active = np.nonzero(any_kept & (s > 0))[0]
    lo = np.full(n_rep, d0)
    hi = lam.copy()
    scale = np.maximum(np.abs(lam), abs(d0)) + 1e-300
    for _ in range(200):
        if active.size == 0:
            break
        x = lam[active]
        f, fp = f_and_fp(active, x)
        overshoot = f < 0.0
        lo[active[overshoot]] = x[overshoot]
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = x - np.where(fp > 0, f / fp, 0.0)
        x_new = np.where(overshoot, 0.5 * (x + hi[active]), newton)
        bad = ~overshoot & (x_new <= lo[active])
        x_new = np.where(bad, 0.5 * (x + lo[active]), x_new)
        hi[active[~overshoot]] = x[~overshoot]
        done = np.abs(x_new - x) <= SECULAR_RTOL * scale[active]
        lam[active] = x_new
        active = active[~done]
    # deflated diagonal entries can exceed the secular root
    if not all_kept and (~kept).any():
        with np.errstate(invalid="ignore"):
            d_un = np.where(~kept, d[None, :], -np.inf).max(axis=1)
        lam = np.maximum(lam, d_un)
    return lam


# ---------------------------------------------------------------------------
# Cross validation of (lambda1, lambda2)
# ---------------------------------------------------------------------------


def default_lambda_grids(n_b: int) -> Tuple[np.ndarray, np.ndarray]:
    """Log-spaced 7-point grids on [1e-4, 1] / n_B for both parameters."""
    grid = np.logspace(-4.0, 0.0, 7) / n_b
    return grid, grid.copy()


def rate_lambdas(n_b: int) -> Tuple[float, float]:
    """Fixed tuning pair on the 1/n_B rate used by the simulation harness.

    The constants (0.05 for the smoothness parameter, 1e-4 for the
    penalty) sit inside the default cross-validation grid ranges; see the
    README for how they were picked.
    """
    return 0.05 / n_b, 1e-4 / n_b


def cross_validate(
    data: TwoSampleData,
    grid1: Sequence[float],
    grid2: Sequence[float],
    folds: int = 5,
    seed: int = 0,
    penalty: str = KL,
    bounds: Tuple[float, float] = (DEFAULT_XI1, DEFAULT_XI2),
    kl_sign: str = KL_AS_WRITTEN,
    cutoff_ratio: float = DEFAULT_EIGEN_CUTOFF,
) -> Tuple[float, float]:
    """Five-fold selection of (lambda1, lambda2) by held-out balance.

    A is partitioned into seeded folds. For each candidate pair the
    held-out criterion is the top eigenvalue of the inner matrix built
    from the held-out A rows (with the weight slope rescaled to the
    held-out count) and the full B sample, at the fitted ratios extended
    by 1 on held-out rows. The grid pair minimizing the mean criterion
    wins; ties break toward the smaller lambda1, then the smaller lambda2.

    Because the extension assigns every held-out row the neutral ratio 1,
    the criterion is driven by lambda1 through the inner matrix only; see
    the package docs for this caveat.

    Raises:
        ConfigError: empty grids, fewer A rows than folds, or an empty fold.
    """
    grid1 = np.unique(np.asarray(grid1, dtype=float))
    grid2 = np.unique(np.asarray(grid2, dtype=float))
    if grid1.size == 0 or grid2.size == 0:
        raise ConfigError("lambda grids must be nonempty")
    if np.any(grid1 <= 0) or np.any(grid2 < 0):
        raise ConfigError("grid1 must be positive, grid2 nonnegative")
    n_a = data.n_a
    if n_a < folds:
        raise ConfigError(f"need n_A >= folds, got {n_a} < {folds}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_a)
    fold_parts = np.array_split(perm, folds)
    if any(part.size == 0 for part in fold_parts):
        raise ConfigError("a cross-validation fold has zero rows")

    scores = np.zeros((grid1.size, grid2.size))
    for holdout in fold_parts:
        x_hold = data.x_a[holdout]
        design = minmax_scale(x_hold, data.x_b)
        spectrum = eigendecompose(gram_matrix(design), cutoff_ratio)
        n_val = spectrum.P1.shape[0]
        n_hold = holdout.size
        slope = data.n_pop / n_hold - 1.0
        w = np.zeros(n_val)
        np.add.at(w, design.a_rows, 1.0 + slope)
        np.add.at(w, design.b_rows, -data.d_b)
        v = spectrum.P1.T @ w
        rho = n_val / data.n_pop**2
        for i, lam1 in enumerate(grid1):
            d = -n_val * lam1 / spectrum.Q1
            top, _, _ = _largest_eig(d, v, rho)
            scores[i, :] += top
    scores /= folds
    flat = np.argmin(scores)  # argmin scans row-major: smaller lambda1,
    i, j = np.unravel_index(flat, scores.shape)  # then smaller lambda2
    return float(grid1[i]), float(grid2[j])
