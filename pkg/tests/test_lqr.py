"""Riccati ODE and ARE, dichotomy, static and dynamic LQ optimality systems."""

import numpy as np
import pytest
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import expm, solve_continuous_are, solve_continuous_lyapunov

import lqr
from conftest import bump
from demographics import FertilityRate, MortalityRate
from errors import DomainError, ShapeError, StaticSingularityError
from lqr import (ModalLTI, are_residual, assemble_modal_system, build_dichotomy, closed_loop_rate,
                 closed_loop_simulate, gradient_check, hamiltonian_gap, lq_cost, optimal_cost, reduced_gradient,
                 riccati_feedback_trajectory, shift_system, simulate_midpoint, solve_are,
                 solve_dynamic_lq, solve_lyapunov, solve_riccati_ode, solve_static_lq, static_cost)
from transport import AgeGrid


def scalar_riccati(a, b, N, E0, tau):
    """Closed form of E' = N + 2 a E - b^2 E^2."""
    root = np.sqrt(a * a + b * b * N)
    e_plus, e_minus = (a + root) / b ** 2, (a - root) / b ** 2
    d = e_plus - e_minus
    u0 = E0 - e_plus
    decay = np.exp(-b * b * d * tau)
    return e_plus + d * u0 * decay / (d + u0 * (1.0 - decay))


class TestSystem:
    def test_assembly_shapes(self, small_system):
        assert small_system.n == 21
        assert small_system.m == 1
        assert small_system.B[0, 0] == pytest.approx(20.0)

    def test_rejects_negative_eigenvalue(self, baseline_rates):
        mu, beta = baseline_rates
        with pytest.raises(DomainError):
            assemble_modal_system(AgeGrid(1.0, 10), mu, beta, eigenvalue=-1.0)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ShapeError):
            ModalLTI(np.eye(3), np.ones((2, 1)))

    def test_last_node_mortality_is_finite(self, small_system):
        assert np.all(np.isfinite(small_system.A))

    def test_shift_lowers_diagonal(self, small_system):
        shifted = shift_system(small_system, 0.5)
        np.testing.assert_allclose(shifted.A + 0.5 * np.eye(small_system.n), small_system.A, atol=1e-12)
        np.testing.assert_array_equal(shifted.B, small_system.B)
        assert shifted.weight == small_system.weight


class TestRiccatiODE:
    def test_scalar_closed_form(self):
        sys = ModalLTI(np.array([[0.5]]), np.array([[1.0]]), weight=2.0)
        ric = solve_riccati_ode(sys, 3.0, n_records=30, max_step=1e-3)
        expected = scalar_riccati(0.5, 1.0, 2.0, 1.0, ric.taus)
        np.testing.assert_allclose(ric.values[:, 0, 0], expected, rtol=1e-8)

    def test_monotone_from_zero(self, small_system):
        ric = solve_riccati_ode(small_system, 2.0, n_records=20, initial=np.zeros((21, 21)))
        assert ric.monotonicity_slack() >= -1e-9
        assert ric.symmetry_defect() == 0.0

    def test_positive_definite_from_identity(self, small_system):
        assert solve_riccati_ode(small_system, 1.0, n_records=10).is_positive_definite()

    def test_converges_to_are(self, small_system):
        E_inf = solve_are(small_system).E
        E_50 = solve_riccati_ode(small_system, 50.0, n_records=5).final
        np.testing.assert_allclose(E_50, E_inf, atol=1e-6 * np.linalg.norm(E_inf))

    def test_uncontrolled_matches_matrix_exponential(self):
        A = np.array([[-1.0, 0.4, 0.0], [0.2, -1.0, 0.3], [0.0, -0.6, -2.0]])
        sys = ModalLTI(A, np.zeros((3, 1)), weight=1.5)
        E0 = np.diag([1.0, 2.0, 0.5])
        ric = solve_riccati_ode(sys, 2.0, n_records=8, initial=E0, max_step=1e-3)
        # int_0^tau e^{A^T s} e^{A s} ds = X - e^{A^T tau} X e^{A tau} with A^T X + X A = -I
        X = solve_continuous_lyapunov(A.T, -np.eye(3))
        for tau, E in zip(ric.taus, ric.values):
            F = expm(tau * A)
            expected = F.T @ E0 @ F + 1.5 * (X - F.T @ X @ F)
            np.testing.assert_allclose(E, expected, rtol=1e-9, atol=1e-10)

    def test_interpolation_and_range(self):
        sys = ModalLTI(np.array([[0.0]]), np.array([[1.0]]))
        ric = solve_riccati_ode(sys, 1.0, n_records=4)
        assert ric.at(0.0)[0, 0] == pytest.approx(1.0)
        with pytest.raises(DomainError):
            ric.at(1.5)

    def test_rejects_bad_horizon(self, small_system):
        with pytest.raises(DomainError):
            solve_riccati_ode(small_system, 0.0)


class TestARE:
    def test_residual_and_reference(self, small_system):
        result = solve_are(small_system)
        assert are_residual(small_system, result.E) <= 1e-10 * np.sqrt(small_system.n)
        assert result.closed_loop_abscissa < 0.0
        reference = solve_continuous_are(small_system.A, small_system.B,
                                         small_system.weight * np.eye(small_system.n), np.eye(1))
        np.testing.assert_allclose(result.E, reference, rtol=1e-6, atol=1e-9)

    def test_unstable_drift_uses_riccati_seed(self):
        sys = ModalLTI(np.array([[1.0, 1.0], [0.0, 0.5]]), np.array([[0.0], [1.0]]))
        result = solve_are(sys)
        assert result.seed != "zero"
        assert closed_loop_rate(sys, result.E) > 0.0

    def test_seed_step_does_not_change_solution(self):
        sys = ModalLTI(np.array([[1.0, 1.0], [0.0, 0.5]]), np.array([[0.0], [1.0]]))
        coarse = solve_are(sys)
        fine = solve_are(sys, max_step=1e-3)
        assert fine.seed == coarse.seed
        np.testing.assert_allclose(fine.E, coarse.E, rtol=1e-8)

    def test_scalar_stabilizing_root(self):
        sys = ModalLTI(np.array([[0.5]]), np.array([[1.0]]), weight=2.0)
        assert solve_are(sys).E[0, 0] == pytest.approx(0.5 + np.sqrt(2.25), rel=1e-10)

    def test_uncontrolled_stable_drift_is_lyapunov_integral(self, small_system):
        sys = ModalLTI(small_system.A, np.zeros((small_system.n, 1)), weight=2.0)
        assert np.max(np.linalg.eigvals(sys.A).real) < 0
        result = solve_are(sys)
        assert result.seed == "zero"
        expected = solve_continuous_lyapunov(sys.A.T, -2.0 * np.eye(sys.n))
        np.testing.assert_allclose(result.E, expected, rtol=1e-8, atol=1e-10 * np.linalg.norm(expected))

    def test_lyapunov_decay_along_closed_loop(self, small_system):
        E = solve_are(small_system).E
        y0 = bump(small_system.grid.ages)
        stiff = np.linalg.norm(lqr.closed_loop_matrix(small_system, E), np.inf)
        traj = closed_loop_simulate(small_system, E, y0, 1.0, n_steps=max(4000, int(50 * stiff)))
        V = np.einsum("ti,ij,tj->t", traj.states, E, traj.states)
        rate = small_system.weight * np.sum(traj.states ** 2, axis=1) + np.sum(traj.controls ** 2, axis=1)
        # d/dt y^T E y = -(N |y|^2 + |B^T E y|^2) on the closed loop
        np.testing.assert_allclose(V[0] - V, cumulative_trapezoid(rate, traj.times, initial=0.0),
                                   rtol=1e-3, atol=1e-8 * V[0])
        assert V[-1] == pytest.approx(V[0] - 2.0 * traj.cost, rel=1e-3, abs=1e-8 * V[0])

    def test_closed_loop_decays(self, small_system):
        E = solve_are(small_system).E
        y0 = bump(small_system.grid.ages)
        traj = closed_loop_simulate(small_system, E, y0, 5.0)
        assert closed_loop_rate(small_system, E) > 0.0
        assert np.linalg.norm(traj.states[-1]) < 0.5 * np.linalg.norm(y0)


class TestLyapunov:
    @pytest.mark.parametrize("orientation", ["left", "right"])
    @pytest.mark.parametrize("n", [6, 30])
    def test_residual(self, orientation, n):
        # n = 30 exceeds the Kronecker size and goes through Bartels-Stewart
        rng = np.random.default_rng(3)
        M = rng.normal(size=(n, n)) - 2.0 * np.sqrt(n) * np.eye(n)
        Q = rng.normal(size=(n, n))
        X = solve_lyapunov(M, Q, orientation)
        op = M if orientation == "left" else M.T
        assert np.linalg.norm(op @ X + X @ op.T - Q) <= 1e-10 * np.linalg.norm(Q)

    def test_scalar_orientation(self):
        assert solve_lyapunov(np.array([[-1.0]]), np.array([[1.0]]))[0, 0] == pytest.approx(-0.5)

    def test_symmetric_rhs_gives_symmetric_solution(self, small_system):
        S = solve_lyapunov(small_system.A, np.eye(small_system.n))
        np.testing.assert_array_equal(S, S.T)

    def test_unknown_orientation(self):
        with pytest.raises(DomainError):
            solve_lyapunov(np.eye(2), np.eye(2), "up")


class TestDichotomy:
    def test_block_diagonalises(self, small_system):
        E = solve_are(small_system).E
        dichotomy = build_dichotomy(small_system, E)
        assert dichotomy.residual <= 1e-8
        assert dichotomy.inverse_defect <= 1e-8 * max(1.0, np.linalg.norm(dichotomy.Lam))

    def test_scalar_closed_form(self):
        sys = ModalLTI(np.array([[0.5]]), np.array([[1.0]]), weight=2.0)
        r = np.sqrt(0.25 + 2.0)
        E = solve_are(sys).E
        dichotomy = build_dichotomy(sys, E)
        S = -1.0 / (2.0 * r)
        expected = np.array([[1.0, S], [E[0, 0], E[0, 0] * S + 1.0]])
        np.testing.assert_allclose(dichotomy.Lam, expected, rtol=1e-10)
        np.testing.assert_allclose(dichotomy.block_form(sys.hamiltonian()), np.diag([-r, r]), atol=1e-10)

    def test_hamiltonian_has_no_imaginary_axis_spectrum(self, small_system):
        assert hamiltonian_gap(small_system) > 0.0


class TestStatic:
    def test_optimality_system(self, small_system):
        y_d = bump(small_system.grid.ages)
        y, v, p = solve_static_lq(small_system, y_d)
        np.testing.assert_allclose(small_system.A @ y + small_system.B @ v, 0.0, atol=1e-9)
        np.testing.assert_allclose(v, -small_system.B.T @ p, atol=1e-9)
        assert static_cost(small_system, y, v, y_d) <= static_cost(small_system, np.zeros(21), np.zeros(1), y_d)

    def test_two_state_grid_search(self):
        sys = ModalLTI(np.array([[-1.0, 0.5], [0.3, -2.0]]), np.array([[1.0], [0.0]]), weight=1.5)
        y_d = np.array([1.0, 0.5])
        y, v, _ = solve_static_lq(sys, y_d)
        # steady states are y = -A^{-1} B v, so a grid over v covers them all
        grid = np.linspace(-5.0, 5.0, 200001)
        states = -np.linalg.solve(sys.A, sys.B) * grid
        costs = 0.75 * np.sum((states - y_d[:, None]) ** 2, axis=0) + 0.5 * grid ** 2
        best = int(np.argmin(costs))
        assert v[0] == pytest.approx(grid[best], abs=1e-4)
        np.testing.assert_allclose(y, states[:, best], atol=1e-4)
        assert static_cost(sys, y, v, y_d) <= costs[best] + 1e-12

    def test_zero_target(self, small_system):
        y, v, p = solve_static_lq(small_system)
        assert not np.any(y) and not np.any(v) and not np.any(p)

    def test_singular_drift(self):
        mu = MortalityRate("constant", rate=0.0)
        beta = FertilityRate("constant", rate=1.0)
        sys = assemble_modal_system(AgeGrid(1.0, 20), mu, beta, eigenvalue=0.0)
        with pytest.raises(StaticSingularityError):
            solve_static_lq(sys, np.ones(sys.n))


class TestDynamic:
    def test_zero_data_gives_zero(self, small_system):
        triple = solve_dynamic_lq(small_system, np.zeros(21), None, 1.0, 20)
        assert not np.any(triple.states)
        assert not np.any(triple.controls)
        assert triple.cost == 0.0

    def test_reduced_gradient_vanishes_at_optimum(self, small_system):
        y0 = bump(small_system.grid.ages)
        y_d = 0.5 * np.ones(21)
        triple = solve_dynamic_lq(small_system, y0, y_d, 1.0, 40)
        grad = reduced_gradient(small_system, y0, triple.controls_mid, 1.0, y_d)
        assert np.linalg.norm(grad) <= 1e-8 * max(1.0, np.linalg.norm(triple.controls_mid))
        assert triple.kkt_residual <= 1e-10

    @pytest.mark.parametrize("terminal", ["none", "half_norm"])
    def test_gradient_matches_finite_differences(self, small_system, terminal):
        y0 = bump(small_system.grid.ages)
        y_d = 0.5 * np.ones(21)
        for seed in range(5):
            gap = gradient_check(small_system, y0, 1.0, 30, np.random.default_rng(seed), y_d, terminal)
            assert gap < 1e-6

    def test_gradient_check_flags_wrong_gradient(self, small_system, monkeypatch):
        exact = lqr.reduced_gradient
        monkeypatch.setattr(lqr, "reduced_gradient", lambda *args: 1.01 * exact(*args))
        gap = gradient_check(small_system, bump(small_system.grid.ages), 1.0, 30, np.random.default_rng(0))
        assert gap == pytest.approx(0.01 / 1.01, rel=1e-6)

    def test_reduced_gradient_coordinates(self, small_system):
        rng = np.random.default_rng(4)
        y0 = bump(small_system.grid.ages)
        controls = rng.normal(size=(12, 1))
        times = np.linspace(0.0, 1.0, 13)
        grad = reduced_gradient(small_system, y0, controls, 1.0, None, "half_norm")

        def cost(c):
            return lq_cost(small_system, times, simulate_midpoint(small_system, y0, c, 1.0), c,
                           terminal="half_norm")

        for j in rng.choice(12, size=4, replace=False):
            e = np.zeros_like(controls)
            e[j, 0] = 1e-3
            fd = (cost(controls + e) - cost(controls - e)) / 2e-3
            assert fd == pytest.approx(grad[j, 0], rel=1e-6, abs=1e-9)

    def test_perturbed_control_costs_more(self, small_system):
        y0 = bump(small_system.grid.ages)
        triple = solve_dynamic_lq(small_system, y0, None, 1.0, 40, terminal="half_norm")
        rng = np.random.default_rng(1)
        perturbed = triple.controls_mid + 1e-2 * rng.normal(size=triple.controls_mid.shape)
        states = simulate_midpoint(small_system, y0, perturbed, 1.0)
        np.testing.assert_allclose(simulate_midpoint(small_system, y0, triple.controls_mid, 1.0),
                                   triple.states, atol=1e-10)
        assert lq_cost(small_system, triple.times, states, perturbed, terminal="half_norm") > triple.cost

    def test_terminal_adjoint(self, small_system):
        y0 = bump(small_system.grid.ages)
        triple = solve_dynamic_lq(small_system, y0, None, 1.0, 20, terminal="half_norm")
        np.testing.assert_array_equal(triple.adjoints[-1], triple.states[-1])
        free = solve_dynamic_lq(small_system, y0, None, 1.0, 20)
        assert not np.any(free.adjoints[-1])

    @pytest.mark.slow
    def test_kkt_matches_riccati_feedback_at_second_order(self, baseline_rates):
        mu, beta = baseline_rates
        sys = assemble_modal_system(AgeGrid(1.0, 8), mu, beta, eigenvalue=0.0)
        y0 = bump(sys.grid.ages)
        reference = riccati_feedback_trajectory(sys, y0, 1.0, 800)
        errors = []
        for M in (50, 100, 200):
            triple = solve_dynamic_lq(sys, y0, None, 1.0, M, terminal="half_norm")
            gap = triple.states - reference.states[:: 800 // M]
            errors.append(np.sqrt(np.sum(gap ** 2) / M))
        assert errors[0] > errors[1] > errors[2]
        assert np.log2(errors[1] / errors[2]) >= 1.8

    def test_optimal_value_identity(self, small_system):
        y0 = bump(small_system.grid.ages)
        triple = solve_dynamic_lq(small_system, y0, None, 1.0, 400, terminal="half_norm")
        assert triple.cost == pytest.approx(optimal_cost(small_system, y0, 1.0), rel=1e-3)

    def test_validation(self, small_system):
        with pytest.raises(DomainError):
            solve_dynamic_lq(small_system, np.zeros(21), None, 1.0, 10, terminal="quadratic")
        with pytest.raises(ShapeError):
            solve_dynamic_lq(small_system, np.zeros(5), None, 1.0, 10)
