"""Two-sample estimation input."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ShapeError


@dataclass(frozen=True)
class TwoSampleData:
    """Non-probability sample A and reference probability sample B.

    Attributes:
        x_a: (n_A, d) covariates of the non-probability sample.
        y_a: n_A responses, observed on A only.
        x_b: (n_B, d) covariates of the probability sample.
        d_b: n_B design weights, the reciprocal inclusion probabilities.
        n_pop: population size N; when not supplied it is estimated by
            the design-weight total sum(d_b).

    Raises:
        ShapeError: inconsistent array lengths or dimensions.
        InputError: non-finite values, nonpositive design weights, or
            fewer than two rows in either sample.
    """

    x_a: np.ndarray
    y_a: np.ndarray
    x_b: np.ndarray
    d_b: np.ndarray
    n_pop: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        x_a = np.atleast_2d(np.asarray(self.x_a, dtype=float))
        x_b = np.atleast_2d(np.asarray(self.x_b, dtype=float))
        y_a = np.asarray(self.y_a, dtype=float).reshape(-1)
        d_b = np.asarray(self.d_b, dtype=float).reshape(-1)
        if x_a.shape[1] != x_b.shape[1]:
            raise ShapeError(
                f"A has {x_a.shape[1]} covariates, B has {x_b.shape[1]}"
            )
        if x_a.shape[0] != y_a.shape[0]:
            raise ShapeError("x_a and y_a lengths differ")
        if x_b.shape[0] != d_b.shape[0]:
            raise ShapeError("x_b and d_b lengths differ")
        if x_a.shape[0] < 2 or x_b.shape[0] < 2:
            raise InputError("each sample needs at least two rows")
        for name, arr in (("x_a", x_a), ("y_a", y_a),
                          ("x_b", x_b), ("d_b", d_b)):
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name} contains non-finite values")
        if np.any(d_b <= 0):
            raise InputError("design weights must be positive")
        n_pop = self.n_pop
        if n_pop is None:
            n_pop = float(d_b.sum())
        elif not np.isfinite(n_pop) or n_pop <= 0:
            raise InputError(f"population size must be positive, got {n_pop}")
        object.__setattr__(self, "x_a", x_a)
        object.__setattr__(self, "y_a", y_a)
        object.__setattr__(self, "x_b", x_b)
        object.__setattr__(self, "d_b", d_b)
        object.__setattr__(self, "n_pop", float(n_pop))

    @property
    def n_a(self) -> int:
        return self.x_a.shape[0]

    @property
    def n_b(self) -> int:
        return self.x_b.shape[0]

    @property
    def dim(self) -> int:
        return self.x_a.shape[1]
