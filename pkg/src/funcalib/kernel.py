"""Tensor-product Sobolev kernel, pooled Gram matrices, and truncated spectra.

The one-dimensional kernel is the reproducing kernel of the second-order
Sobolev space on [0, 1], written with scaled Bernoulli polynomials::

    K(s, t) = 1 + k1(s) k1(t) + k2(s) k2(t) - k4(|s - t|)

    k1(t) = t - 1/2
    k2(t) = (k1(t)^2 - 1/12) / 2
    k4(t) = (k1(t)^4 - k1(t)^2 / 2 + 7/240) / 24

Multivariate kernels are coordinate-wise products of the 1-d kernel, so all
inputs must live in the unit cube; ``minmax_scale`` maps pooled raw
covariates there and remembers the affine map for later prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateScaleError,
    DegenerateSpectrumError,
    DomainError,
    ShapeError,
)

DEFAULT_EIGEN_CUTOFF = 1e-12


def _check_unit_interval(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DomainError(f"{name} has entries outside [0, 1]")


def sobolev_kernel_1d(s, t):
    """Second-order Sobolev spline kernel on [0, 1].

    Accepts scalars or broadcastable arrays; returns a float for scalar
    input.

    Raises:
        DomainError: if any input lies outside [0, 1].
    """
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    _check_unit_interval(s, "s")
    _check_unit_interval(t, "t")
    a = s - 0.5
    b = t - 0.5
    k2s = 0.5 * (a * a - 1.0 / 12.0)
    k2t = 0.5 * (b * b - 1.0 / 12.0)
    u = np.abs(s - t) - 0.5
    u2 = u * u
    k4 = (u2 * u2 - 0.5 * u2 + 7.0 / 240.0) / 24.0
    out = 1.0 + a * b + k2s * k2t - k4
    if out.ndim == 0:
        return float(out)
    return out


def tensor_kernel(x, y):
    """Product of ``sobolev_kernel_1d`` over coordinates of two points.

    Raises:
        ShapeError: if the points have different dimension.
        DomainError: if any coordinate lies outside [0, 1].
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise ShapeError(f"dimension mismatch: {x.shape} vs {y.shape}")
    vals = sobolev_kernel_1d(x, y)
    return float(np.prod(np.atleast_1d(vals)))


@dataclass(frozen=True)
class ScaledDesign:
    """Pooled, min-max scaled, deduplicated design for kernel evaluation.

    Attributes:
        points: (n, d) distinct rows in [0, 1]^d.
        scaler: (d, 2) per-dimension pooled (min, max).
        a_rows: design-row index of each original A row, length n_A.
        b_rows: design-row index of each original B row, length n_B.

    Every design row is referenced by at least one entry of ``a_rows`` or
    ``b_rows``; a row hit by both carries both origin tags.
    """

    points: np.ndarray
    scaler: np.ndarray
    a_rows: np.ndarray
    b_rows: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def transform(self, raw, clip: bool = True) -> np.ndarray:
        """Applies the stored affine map to new raw covariate rows.

        Out-of-range values are clipped into [0, 1] when ``clip`` is set,
        so kernel evaluation at prediction time stays in-domain.
        """
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        if raw.shape[1] != self.dim:
            raise ShapeError(
                f"expected {self.dim} columns, got {raw.shape[1]}"
            )
        lo = self.scaler[:, 0]
        span = self.scaler[:, 1] - self.scaler[:, 0]
        out = (raw - lo) / span
        if clip:
            out = np.clip(out, 0.0, 1.0)
        return out


def minmax_scale(raw_a, raw_b) -> ScaledDesign:
    """Scales pooled A and B covariates to [0, 1]^d and removes duplicates.

    The per-column affine map uses the pooled min and max; rows that are
    bitwise equal after scaling collapse to a single design row while the
    origin bookkeeping keeps one entry per original row.

    Raises:
        ShapeError: empty input or mismatched column counts.
        DegenerateScaleError: a pooled column is constant.
        DomainError: non-finite covariate values.
    """
    a = np.atleast_2d(np.asarray(raw_a, dtype=float))
    b = np.atleast_2d(np.asarray(raw_b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ShapeError("covariate matrices must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"column mismatch: A has {a.shape[1]}, B has {b.shape[1]}"
        )
    pooled = np.vstack([a, b])
    if not np.all(np.isfinite(pooled)):
        raise DomainError("covariates contain non-finite values")
    lo = pooled.min(axis=0)
    hi = pooled.max(axis=0)
    span = hi - lo
    bad = np.nonzero(span <= 0)[0]
    if bad.size:
        raise DegenerateScaleError(
            f"constant covariate column(s): {bad.tolist()}"
        )
    scaled = (pooled - lo) / span
    points, inverse = np.unique(scaled, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_a = a.shape[0]
    return ScaledDesign(
        points=points,
        scaler=np.column_stack([lo, hi]),
        a_rows=inverse[:n_a].copy(),
        b_rows=inverse[n_a:].copy(),
    )


def gram_matrix(design: ScaledDesign) -> np.ndarray:
    """Dense Gram matrix of the tensor kernel over the design rows.

    The result is exactly symmetric (each term of the kernel formula is
    evaluated identically for (i, j) and (j, i)) and positive semidefinite
    up to round-off.
    """
    return gram_cross(design.points, design.points)


def gram_cross(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Kernel matrix K(left_i, right_j) for scaled point sets."""
    left = np.atleast_2d(np.asarray(left, dtype=float))
    right = np.atleast_2d(np.asarray(right, dtype=float))
    if left.shape[1] != right.shape[1]:
        raise ShapeError(
            f"dimension mismatch: {left.shape[1]} vs {right.shape[1]}"
        )
    _check_unit_interval(left, "left points")
    _check_unit_interval(right, "right points")
    out = np.ones((left.shape[0], right.shape[0]))
    for j in range(left.shape[1]):
        s = left[:, j][:, None]
        t = right[:, j][None, :]
        a = s - 0.5
        b = t - 0.5
        k2s = 0.5 * (a * a - 1.0 / 12.0)
        k2t = 0.5 * (b * b - 1.0 / 12.0)
        u = np.abs(s - t) - 0.5
        u2 = u * u
        k4 = (u2 * u2 - 0.5 * u2 + 7.0 / 240.0) / 24.0
        out *= 1.0 + a * b + k2s * k2t - k4
    return out


@dataclass(frozen=True)
class GramSpectrum:
    """Truncated eigendecomposition M ~ P1 diag(Q1) P1^T.

    Attributes:
        P1: (n, m) matrix with orthonormal columns.
        Q1: m positive eigenvalues, nonincreasing.
        recon_error: Frobenius norm of P1 diag(Q1) P1^T - M, i.e. the
            root-sum-square of the discarded eigenvalues.
    """

    P1: np.ndarray
    Q1: np.ndarray
    recon_error: float

    def __post_init__(self):
        if self.Q1.ndim != 1 or self.P1.shape[1] != self.Q1.shape[0]:
            raise ShapeError("P1 columns must match Q1 length")
        if self.Q1.size == 0 or self.Q1[-1] <= 0:
            raise DegenerateSpectrumError("Q1 must be strictly positive")
        if np.any(np.diff(self.Q1) > 0):
            raise ShapeError("Q1 must be nonincreasing")

    @property
    def rank(self) -> int:
        return self.Q1.shape[0]

    def orthonormality_defect(self) -> float:
        """max |P1^T P1 - I|; used by invariant tests, not hot paths."""
        g = self.P1.T @ self.P1
        return float(np.abs(g - np.eye(self.rank)).max())


def eigendecompose(
    matrix: np.ndarray, cutoff_ratio: float = DEFAULT_EIGEN_CUTOFF
) -> GramSpectrum:
    """Symmetric eigendecomposition keeping eigenvalues above a cutoff.

    Eigenpairs with eigenvalue > ``cutoff_ratio`` times the largest
    eigenvalue are retained, ordered by decreasing eigenvalue.

    Raises:
        ShapeError: input is not symmetric within 1e-12 relative tolerance.
        DegenerateSpectrumError: no eigenvalue clears the cutoff.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got {m.shape}")
    scale = np.abs(m).max() if m.size else 0.0
    if scale > 0 and np.abs(m - m.T).max() > 1e-12 * scale:
        raise ShapeError("matrix is not symmetric within 1e-12 relative")
    eigvals, eigvecs = np.linalg.eigh(m)
    top = eigvals[-1]
    if top <= 0:
        raise DegenerateSpectrumError("largest eigenvalue is not positive")
    keep = eigvals > cutoff_ratio * top
    if not keep.any():
        raise DegenerateSpectrumError("all eigenvalues below cutoff")
    order = np.argsort(eigvals[keep])[::-1]
    q1 = eigvals[keep][order]
    p1 = eigvecs[:, keep][:, order]
    dropped = eigvals[~keep]
    recon = float(np.sqrt((dropped * dropped).sum()))
    return GramSpectrum(P1=np.ascontiguousarray(p1), Q1=q1, recon_error=recon)
