"""Kernel, scaling, Gram, and spectrum tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funcalib.errors import (
    DegenerateScaleError,
    DegenerateSpectrumError,
    DomainError,
    ShapeError,
)
from funcalib.kernel import (
    GramSpectrum,
    eigendecompose,
    gram_matrix,
    minmax_scale,
    sobolev_kernel_1d,
    tensor_kernel,
)

# Frozen by symbolic evaluation of the Bernoulli-polynomial formula with
# sympy (exact rationals 151/120, 321/320, 23027/24000, 91/120).
K_00 = 1.2583333333333333
K_HALF_HALF = 1.003125
K_03_07 = 0.9594583333333333
K_01 = 0.7583333333333333


class TestSobolevKernel1d:
    def test_symmetry_pair(self):
        assert sobolev_kernel_1d(0.3, 0.7) == sobolev_kernel_1d(0.7, 0.3)

    def test_value_at_origin(self):
        assert sobolev_kernel_1d(0.0, 0.0) == pytest.approx(K_00, abs=1e-12)

    def test_value_at_center(self):
        assert sobolev_kernel_1d(0.5, 0.5) == pytest.approx(
            K_HALF_HALF, abs=1e-12
        )

    def test_more_symbolic_points(self):
        assert sobolev_kernel_1d(0.3, 0.7) == pytest.approx(K_03_07, abs=1e-12)
        assert sobolev_kernel_1d(0.0, 1.0) == pytest.approx(K_01, abs=1e-12)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            sobolev_kernel_1d(-0.01, 0.5)
        with pytest.raises(DomainError):
            sobolev_kernel_1d(0.5, 1.01)

    def test_grid_symmetry_exact(self):
        s = np.linspace(0.0, 1.0, 100)
        k = sobolev_kernel_1d(s[:, None], s[None, :])
        assert np.array_equal(k, k.T)

    @given(
        st.floats(min_value=0.0, max_value=1.0),
        st.floats(min_value=0.0, max_value=1.0),
    )
    def test_symmetry_property(self, s, t):
        assert sobolev_kernel_1d(s, t) == sobolev_kernel_1d(t, s)


class TestTensorKernel:
    def test_d1_equals_1d(self):
        assert tensor_kernel([0.3], [0.8]) == sobolev_kernel_1d(0.3, 0.8)

    def test_equal_points_square(self):
        val = tensor_kernel([0.5, 0.5], [0.5, 0.5])
        assert val == pytest.approx(sobolev_kernel_1d(0.5, 0.5) ** 2, rel=1e-15)

    def test_triple_product(self):
        rng = np.random.default_rng(3)
        x, y = rng.random(3), rng.random(3)
        expected = 1.0
        for j in range(3):
            expected *= sobolev_kernel_1d(x[j], y[j])
        assert tensor_kernel(x, y) == pytest.approx(expected, rel=1e-14)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            tensor_kernel([0.1, 0.2], [0.1])


class TestMinmaxScale:
    def test_simple_column(self):
        design = minmax_scale([[0.0], [5.0]], [[10.0]])
        np.testing.assert_array_equal(
            np.sort(design.points.ravel()), [0.0, 0.5, 1.0]
        )

    def test_identity_on_unit_interval(self):
        a = np.array([[0.0, 0.25], [1.0, 1.0]])
        b = np.array([[0.5, 0.0], [0.75, 0.9]])
        design = minmax_scale(a, b)
        pooled = np.vstack([a, b])
        assert set(map(tuple, design.points)) == set(map(tuple, pooled))

    def test_dedup_shared_row(self):
        a = np.array([[0.0, 0.0], [1.0, 2.0]])
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        design = minmax_scale(a, b)
        assert design.n_rows == 3
        assert design.a_rows[1] == design.b_rows[0]

    def test_constant_column_rejected(self):
        with pytest.raises(DegenerateScaleError):
            minmax_scale([[1.0, 2.0]], [[1.0, 3.0]])

    def test_all_coordinates_in_unit_cube(self):
        rng = np.random.default_rng(8)
        design = minmax_scale(
            rng.standard_normal((20, 3)) * 40, rng.standard_normal((10, 3))
        )
        assert design.points.min() >= 0.0
        assert design.points.max() <= 1.0

    def test_scale_idempotence(self):
        rng = np.random.default_rng(5)
        a = rng.random((10, 2))
        a[0] = 0.0
        a[1] = 1.0
        b = rng.random((5, 2))
        design = minmax_scale(a, b)
        again = minmax_scale(
            design.points[design.a_rows], design.points[design.b_rows]
        )
        assert set(map(tuple, again.points)) == set(map(tuple, design.points))

    def test_transform_clips(self):
        design = minmax_scale([[0.0], [1.0]], [[0.5]])
        out = design.transform([[2.0], [-1.0]])
        assert out.max() <= 1.0 and out.min() >= 0.0


class TestGramMatrix:
    def test_single_point_at_least_one(self):
        # grid-scan oracle: the 1-d kernel diagonal is minimized above 1
        s = np.linspace(0, 1, 2001)
        diag_min = sobolev_kernel_1d(s, s).min()
        assert diag_min >= 1.0
        design = minmax_scale([[0.0], [0.3]], [[1.0]])
        m = gram_matrix(design)
        assert m.shape == (3, 3)
        assert np.all(np.diag(m) >= 1.0)

    def test_exact_symmetry(self):
        rng = np.random.default_rng(11)
        design = minmax_scale(rng.random((12, 2)), rng.random((6, 2)))
        m = gram_matrix(design)
        assert np.array_equal(m, m.T)

    def test_psd_small(self):
        rng = np.random.default_rng(4)
        design = minmax_scale(rng.random((5, 2)), rng.random((3, 2)))
        m = gram_matrix(design)
        eig = np.linalg.eigvalsh(m)
        assert eig.min() >= -1e-10 * np.trace(m)

    def test_psd_fifty_random_designs(self):
        rng = np.random.default_rng(123)
        for _ in range(50):
            n_a = int(rng.integers(2, 16))
            n_b = int(rng.integers(2, 15))
            d = int(rng.integers(1, 4))
            design = minmax_scale(
                rng.standard_normal((n_a, d)), rng.standard_normal((n_b, d))
            )
            m = gram_matrix(design)
            assert np.linalg.eigvalsh(m).min() >= -1e-10 * np.trace(m)

    def test_reproducing_norm_identity(self):
        rng = np.random.default_rng(2)
        design = minmax_scale(rng.random((6, 2)), rng.random((4, 2)))
        m = gram_matrix(design)
        alpha = np.zeros(design.n_rows)
        alpha[2] = 1.0
        assert alpha @ m @ alpha == m[2, 2]


class TestEigendecompose:
    def test_identity(self):
        spec = eigendecompose(np.eye(3), cutoff_ratio=1e-12)
        np.testing.assert_allclose(spec.Q1, np.ones(3))
        assert spec.rank == 3

    def test_rank_deficient_diagonal(self):
        spec = eigendecompose(np.diag([2.0, 1.0, 0.0]))
        assert spec.rank == 2
        np.testing.assert_allclose(spec.Q1, [2.0, 1.0])

    def test_reconstruction_error_matches_direct(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((8, 8))
        m = a @ a.T
        spec = eigendecompose(m, cutoff_ratio=1e-12)
        direct = np.linalg.norm(spec.P1 @ np.diag(spec.Q1) @ spec.P1.T - m)
        assert spec.recon_error <= 1e-8 * spec.Q1.sum()
        assert abs(spec.recon_error - direct) <= 1e-10 * spec.Q1.sum()

    def test_orthonormal_columns(self):
        rng = np.random.default_rng(10)
        a = rng.standard_normal((10, 4))
        spec = eigendecompose(a @ a.T)
        assert spec.orthonormality_defect() < 1e-10

    def test_non_symmetric_rejected(self):
        m = np.array([[1.0, 0.5], [0.2, 1.0]])
        with pytest.raises(ShapeError):
            eigendecompose(m)

    def test_all_below_cutoff(self):
        with pytest.raises(DegenerateSpectrumError):
            eigendecompose(np.eye(3), cutoff_ratio=2.0)
        with pytest.raises(DegenerateSpectrumError):
            eigendecompose(-np.eye(3))

    def test_gram_reconstruction_bound(self):
        rng = np.random.default_rng(17)
        design = minmax_scale(rng.random((15, 2)), rng.random((8, 2)))
        m = gram_matrix(design)
        spec = eigendecompose(m)
        assert spec.recon_error <= 1e-8 * spec.Q1.sum()


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=2, max_value=8), st.integers(min_value=0, max_value=10_000))
def test_gram_psd_property(n, seed):
    rng = np.random.default_rng(seed)
    design = minmax_scale(rng.random((n, 2)), rng.random((2, 2)))
    m = gram_matrix(design)
    assert np.linalg.eigvalsh(m).min() >= -1e-10 * max(np.trace(m), 1.0)
