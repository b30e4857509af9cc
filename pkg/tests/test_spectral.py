"""Neumann basis: orthonormality, projection, heat semigroup, restriction."""

import numpy as np
import pytest

from errors import DomainError, ShapeError
from spectral import (NeumannBasis, eigenvalue, heat_propagate, indicator_operator,
                      is_full_domain, project, reconstruct)


def test_eigenvalues():
    assert eigenvalue(0, 2.0) == 0.0
    assert eigenvalue(3, 2.0) == pytest.approx((3 * np.pi / 2.0) ** 2)
    basis = NeumannBasis(L=2.0, K=5, n_x=64)
    np.testing.assert_allclose(basis.eigenvalues, [(k * np.pi / 2.0) ** 2 for k in range(5)])


def test_gram_matrix_is_identity(basis):
    np.testing.assert_allclose(basis.gram_matrix(), np.eye(basis.K), atol=1e-12)


def test_project_reconstruct_of_finite_cosine_sum(basis):
    coeffs = np.array([0.3, -1.2, 0.0, 0.7])
    profile = reconstruct(coeffs, basis)
    np.testing.assert_allclose(project(profile, basis), coeffs, atol=1e-12)


def test_project_accepts_leading_axes(basis):
    stack = np.stack([basis.basis_function(1), 2.0 * basis.basis_function(3)])
    np.testing.assert_allclose(project(stack, basis), [[0, 1, 0, 0], [0, 0, 0, 2]], atol=1e-12)


def test_heat_propagate_decays_each_mode(basis):
    c = np.ones(basis.K)
    out = heat_propagate(c, 0.1, basis)
    np.testing.assert_allclose(out, np.exp(-basis.eigenvalues * 0.1))
    assert out[0] == 1.0


def test_heat_propagate_rejects_negative_time(basis):
    with pytest.raises(DomainError):
        heat_propagate(np.ones(basis.K), -1.0, basis)


def test_shape_errors(basis):
    with pytest.raises(ShapeError):
        project(np.ones(basis.n_x + 1), basis)
    with pytest.raises(ShapeError):
        reconstruct(np.ones(basis.K + 1), basis)


def test_too_many_modes_for_grid():
    with pytest.raises(DomainError):
        NeumannBasis(L=1.0, K=10, n_x=8)


def test_indicator_full_domain_is_identity(basis):
    assert is_full_domain(basis, (0.0, basis.L))
    np.testing.assert_allclose(indicator_operator(basis, (0.0, basis.L)), np.eye(basis.K), atol=1e-12)


def test_indicator_subdomain_couples_modes(basis):
    M = indicator_operator(basis, (0.0, 0.5))
    np.testing.assert_allclose(M, M.T, atol=1e-14)
    assert abs(M[0, 1]) > 0.1
    assert np.all(np.linalg.eigvalsh(M) > -1e-12)
    assert np.all(np.linalg.eigvalsh(M) < 1.0 + 1e-12)


def test_indicator_rejects_bad_interval(basis):
    with pytest.raises(DomainError):
        indicator_operator(basis, (0.6, 0.2))
