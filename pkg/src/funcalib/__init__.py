"""Calibration weighting for non-probability samples.

Estimates density-ratio weights for a non-probability sample by uniform
functional calibration in a tensor Sobolev RKHS against a reference
probability sample, and builds bias-adjusted population-mean estimates
with plug-in or bootstrap variances. A Monte Carlo harness reproduces the
desk-scale simulation comparisons.
"""

from .calibrate import (
    CalibrationProblem,
    WeightSolution,
    build_problem,
    cross_validate,
    default_lambda_grids,
    discrepancy_vector,
    inner_value,
    kl_penalty,
    l2_penalty,
    objective_and_grad,
    rate_lambdas,
    secular_max_eig,
    solve_weights,
)
from .data import TwoSampleData
from .estimators import (
    EstimateResult,
    bss,
    dr_estimator,
    dr_theta,
    ev_estimator,
    fit_logistic,
    ht_kl,
    kernel_ridge_fit,
    nsm,
    prop,
)
from .kernel import (
    GramSpectrum,
    ScaledDesign,
    eigendecompose,
    gram_matrix,
    minmax_scale,
    sobolev_kernel_1d,
    tensor_kernel,
)
from .simulate import (
    FinitePopulation,
    PopulationSpec,
    beta33,
    draw_samples,
    gen_population,
    monte_carlo,
    summarize,
    truncated_normal,
)
from .variance import (
    VarianceResult,
    bootstrap_variance,
    confidence_interval,
    normal_quantile,
    plugin_variance_poisson,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationProblem",
    "EstimateResult",
    "FinitePopulation",
    "GramSpectrum",
    "PopulationSpec",
    "ScaledDesign",
    "TwoSampleData",
    "VarianceResult",
    "WeightSolution",
    "beta33",
    "bootstrap_variance",
    "bss",
    "build_problem",
    "confidence_interval",
    "cross_validate",
    "default_lambda_grids",
    "discrepancy_vector",
    "dr_estimator",
    "dr_theta",
    "draw_samples",
    "eigendecompose",
    "ev_estimator",
    "fit_logistic",
    "gen_population",
    "gram_matrix",
    "ht_kl",
    "inner_value",
    "kernel_ridge_fit",
    "kl_penalty",
    "l2_penalty",
    "minmax_scale",
    "monte_carlo",
    "normal_quantile",
    "nsm",
    "objective_and_grad",
    "plugin_variance_poisson",
    "prop",
    "rate_lambdas",
    "secular_max_eig",
    "sobolev_kernel_1d",
    "solve_weights",
    "summarize",
    "tensor_kernel",
    "truncated_normal",
]
