"""Shared fixtures: small synthetic designs and calibration problems."""

import numpy as np
import pytest

from funcalib.calibrate import build_problem
from funcalib.data import TwoSampleData


def make_data(seed=0, n_a=12, n_b=8, d=2, n_pop=100.0):
    """Small synthetic two-sample dataset with positive design weights."""
    rng = np.random.default_rng(seed)
    x_a = rng.random((n_a, d))
    x_b = rng.random((n_b, d))
    y_a = 1.0 + x_a @ np.arange(1, d + 1) + 0.1 * rng.standard_normal(n_a)
    d_b = 1.0 / rng.uniform(0.05, 0.5, n_b)
    return TwoSampleData(x_a=x_a, y_a=y_a, x_b=x_b, d_b=d_b, n_pop=n_pop)


def make_sim_data(setup="linear", n_pop=600, n_a0=150, n_b0=40, seed=0):
    """A realistic draw from the simulated designs (DR/EV solvable)."""
    from funcalib.simulate import PopulationSpec, draw_samples, gen_population

    pop = gen_population(PopulationSpec(setup, n_pop, n_a0, n_b0, seed=seed))
    return draw_samples(pop, seed=seed + 1000), pop


@pytest.fixture
def small_data():
    return make_data()


@pytest.fixture
def sim_data():
    data, _ = make_sim_data()
    return data


@pytest.fixture
def small_problem(small_data):
    return build_problem(small_data, lambda1=1e-3, lambda2=1e-3)
