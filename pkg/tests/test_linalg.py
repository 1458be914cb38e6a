"""Numeric-kernel contracts: studentization, covariance, eigensystems,
rotation isometry, variance-loss formulas, and distance primitives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csvdkit import (DataError, NumericError, covariance, eigendecompose,
                     nmse_global, nmse_residual, rotate,
                     singular_values_from_eigenvalues, squared_distance,
                     squared_distance_from_norms, studentize)
from csvdkit.linalg import apply_studentization, row_squared_distances

# All sign combinations of (+-1, +-0.5): covariance is diag(1, 0.25) by a
# four-term hand sum.
RECTANGLE = np.array([[1, 0.5], [1, -0.5], [-1, 0.5], [-1, -0.5]], dtype=float)


class TestStudentize:
    def test_two_value_column(self):
        fm = studentize(np.array([[2.0], [4.0]]))
        # mean 3, sample std sqrt(2): entries are -+1/sqrt(2)
        expected = 1.0 / np.sqrt(2.0)
        np.testing.assert_allclose(fm.data.ravel(), [-expected, expected])
        assert fm.col_means[0] == 3.0

    def test_constant_column_flagged(self):
        fm = studentize(np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]]))
        np.testing.assert_array_equal(fm.data[:, 0], 0.0)
        assert fm.degenerate.tolist() == [True, False]
        assert fm.col_stds[0] == 0.0

    def test_idempotent_on_normalized_data(self, rng):
        fm = studentize(rng.normal(size=(50, 4)))
        again = studentize(fm.data)
        np.testing.assert_allclose(again.data, fm.data, atol=1e-9)

    def test_columns_have_unit_stats(self, rng):
        fm = studentize(rng.normal(2.0, 3.0, size=(100, 6)))
        np.testing.assert_allclose(fm.data.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(fm.data.std(axis=0, ddof=1), 1.0, atol=1e-6)

    def test_nonfinite_rejected_with_location(self):
        bad = np.ones((3, 3))
        bad[1, 2] = np.nan
        with pytest.raises(DataError, match="row 1, column 2"):
            studentize(bad)

    def test_query_statistics_roundtrip(self, rng):
        raw = rng.normal(5.0, 2.0, size=(40, 3))
        fm = studentize(raw)
        np.testing.assert_allclose(apply_studentization(raw[7], fm), fm.data[7])


class TestCovariance:
    def test_rectangle(self):
        np.testing.assert_allclose(covariance(RECTANGLE), np.diag([1.0, 0.25]), atol=1e-15)

    def test_zero_matrix(self):
        np.testing.assert_array_equal(covariance(np.zeros((4, 3))), np.zeros((3, 3)))

    def test_single_row_outer_product(self):
        x = np.array([[1.0, 2.0, -1.0]])
        np.testing.assert_allclose(covariance(x), x.T @ x)

    def test_center_argument_translates(self, rng):
        X = rng.normal(size=(30, 4))
        c = X.mean(axis=0)
        np.testing.assert_allclose(covariance(X, center=c), covariance(X - c))


class TestEigendecompose:
    def test_diagonal(self):
        eig = eigendecompose(np.diag([1.0, 0.25]))
        np.testing.assert_allclose(eig.eigenvalues, [1.0, 0.25])
        np.testing.assert_allclose(np.abs(eig.eigenvectors), np.eye(2), atol=1e-12)

    def test_two_by_two_closed_form(self):
        eig = eigendecompose(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(eig.eigenvalues, [3.0, 1.0])
        s = 1.0 / np.sqrt(2.0)
        # sign convention: tied-magnitude components resolve to a positive
        # lowest-index entry
        np.testing.assert_allclose(eig.eigenvectors[:, 0], [s, s])
        np.testing.assert_allclose(eig.eigenvectors[:, 1], [s, -s])

    def test_identity_spectrum_invariants_only(self):
        eig = eigendecompose(np.eye(5))
        np.testing.assert_allclose(eig.eigenvalues, 1.0)
        np.testing.assert_allclose(eig.eigenvectors.T @ eig.eigenvectors, np.eye(5), atol=1e-8)

    def test_invariants_on_random_psd(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 17))
            A = rng.normal(size=(n + 3, n))
            C = covariance(A - A.mean(axis=0))
            eig = eigendecompose(C)
            lam, V = eig.eigenvalues, eig.eigenvectors
            assert np.all(np.diff(lam) <= 1e-12)
            assert np.all(lam >= 0.0)
            np.testing.assert_allclose(V.T @ V, np.eye(n), atol=1e-8)
            resid = np.abs(C @ V - V * lam).max()
            assert resid <= 1e-7 * max(1.0, lam[0])

    def test_asymmetric_rejected(self):
        with pytest.raises(DataError, match="symmetric"):
            eigendecompose(np.array([[1.0, 2.0], [0.0, 1.0]]))


class TestSingularValues:
    def test_direct_formula(self):
        np.testing.assert_allclose(singular_values_from_eigenvalues([1.0], 4), [2.0])
        np.testing.assert_allclose(singular_values_from_eigenvalues([4.0, 1.0], 9), [6.0, 3.0])
        np.testing.assert_allclose(singular_values_from_eigenvalues([0.0], 5), [0.0])

    def test_roundtrip_recovers_eigenvalues(self, rng):
        lam = np.sort(rng.uniform(0, 10, size=8))[::-1]
        m = 37
        sigma = singular_values_from_eigenvalues(lam, m)
        np.testing.assert_allclose((sigma / np.sqrt(m)) ** 2, lam, atol=1e-10)

    def test_negative_rejected(self):
        with pytest.raises(NumericError):
            singular_values_from_eigenvalues([1.0, -0.5], 4)


class TestRotate:
    def test_identity(self, rng):
        X = rng.normal(size=(10, 3))
        np.testing.assert_array_equal(rotate(X, np.eye(3)), X)

    def test_planar_rotation_preserves_norm(self):
        V = np.array([[0.0, -1.0], [1.0, 0.0]])  # 90 degrees
        y = rotate(np.array([[1.0, 0.0]]), V)
        np.testing.assert_allclose(np.abs(y), [[0.0, 1.0]], atol=1e-15)
        assert np.isclose(np.linalg.norm(y), 1.0)

    def test_rectangle_variances_match_spectrum(self):
        eig = eigendecompose(covariance(RECTANGLE))
        Y = rotate(RECTANGLE, eig.eigenvectors)
        np.testing.assert_allclose((Y ** 2).mean(axis=0), [1.0, 0.25], atol=1e-12)

    def test_isometry_on_eigenbasis(self, rng):
        X = rng.normal(size=(40, 6))
        X -= X.mean(axis=0)
        eig = eigendecompose(covariance(X))
        Y = rotate(X, eig.eigenvectors)
        d_x = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
        d_y = np.sqrt(((Y[:, None, :] - Y[None, :, :]) ** 2).sum(-1))
        np.testing.assert_allclose(d_y, d_x, rtol=1e-8, atol=1e-10)

    def test_rotated_covariance_diagonal(self, rng):
        X = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 5))
        X -= X.mean(axis=0)
        eig = eigendecompose(covariance(X))
        C_y = covariance(rotate(X, eig.eigenvectors))
        off = np.abs(C_y - np.diag(np.diag(C_y))).max()
        assert off <= 1e-6 * max(1.0, eig.eigenvalues[0])

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            rotate(np.ones((2, 3)), np.eye(4))


class TestNmse:
    def test_boundaries(self):
        lam = [1.0, 0.25]
        assert nmse_global(lam, 2) == 0.0
        assert nmse_global(lam, 0) == 1.0

    def test_tail_ratio(self):
        assert np.isclose(nmse_global([1.0, 0.25], 1), 0.2)

    def test_zero_spectrum_rejected(self):
        with pytest.raises(NumericError):
            nmse_global([0.0, 0.0], 1)

    def test_spectral_equals_residual_form(self, rng):
        X = rng.normal(size=(120, 7)) @ rng.normal(size=(7, 7))
        X -= X.mean(axis=0)
        eig = eigendecompose(covariance(X))
        Y = rotate(X, eig.eigenvectors)
        for n in range(8):
            a = nmse_global(eig.eigenvalues, n)
            b = nmse_residual(Y, n)
            assert a == pytest.approx(b, rel=1e-6, abs=1e-12)


class TestSquaredDistance:
    def test_zero_and_pythagoras(self):
        assert squared_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert squared_distance([0.0, 0.0], [3.0, 4.0]) == 25.0

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            squared_distance([1.0], [1.0, 2.0])

    @given(st.integers(2, 12), st.integers(0, 2 ** 31))
    @settings(max_examples=40, deadline=None)
    def test_both_entry_points_agree(self, dim, seed):
        rng = np.random.default_rng(seed)
        u = rng.normal(size=dim)
        v = rng.normal(size=dim)
        direct = squared_distance(u, v)
        via_norms = squared_distance_from_norms(float(u @ u), float(v @ v), float(u @ v))
        assert via_norms == pytest.approx(direct, rel=1e-9, abs=1e-12)

    def test_row_kernel_matches_scalar(self, rng):
        X = rng.normal(size=(20, 5))
        q = rng.normal(size=5)
        d2 = row_squared_distances(X, q)
        for i in range(20):
            assert d2[i] == pytest.approx(squared_distance(X[i], q), rel=1e-12)
