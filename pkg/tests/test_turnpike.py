"""Boundary-layer fits, plateau verdicts, envelopes, horizon sweeps and dissipativity."""

import numpy as np
import pytest
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import expm

from conftest import bump
from errors import ShapeError
from lqr import ModalLTI, closed_loop_rate, solve_are, solve_dynamic_lq, solve_static_lq
from turnpike import (DeviationSeries, combine_deviations, deviation_curves, dissipativity_check,
                      fit_exponential_rates, horizon_sweep, integral_turnpike_measure,
                      turnpike_report)


def synthetic(T=10.0, n=1001):
    times = np.linspace(0.0, T, n)
    d = 2.0 * np.exp(-3.0 * times) + 0.5 * np.exp(-4.0 * (T - times))
    zeros = np.zeros_like(times)
    return DeviationSeries(times, d, zeros, zeros)


class TestFits:
    def test_recovers_two_boundary_layers(self):
        series = synthetic()
        left, right, plateau = fit_exponential_rates(series.times, series.total)
        assert left.accepted and right.accepted
        assert left.nu == pytest.approx(3.0, rel=1e-2)
        assert left.C == pytest.approx(2.0, rel=1e-2)
        assert right.nu == pytest.approx(4.0, rel=1e-2)
        assert plateau < 1e-4

    def test_flat_deviation_is_rejected(self):
        times = np.linspace(0.0, 1.0, 31)
        left, _, _ = fit_exponential_rates(times, np.full(31, 0.3))
        assert not left.accepted
        assert "rejected" in left.note

    def test_zero_deviation_is_degenerate(self):
        times = np.linspace(0.0, 1.0, 31)
        left, right, plateau = fit_exponential_rates(times, np.zeros(31))
        assert left.points == 0 and "degenerate" in left.note
        assert plateau == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            fit_exponential_rates(np.linspace(0, 1, 5), np.ones(4))


class TestReport:
    def test_turnpike_observed(self):
        report = turnpike_report(synthetic(), initial_gap=2.0, terminal_gap=0.5)
        assert report.observed
        assert report.peak == pytest.approx(2.0)
        assert report.envelope is not None and report.envelope.holds
        assert report.envelope.nu == pytest.approx(3.0, rel=1e-2)
        assert "verdict = turnpike observed" in report.to_lines()

    def test_flat_deviation_not_observed(self):
        times = np.linspace(0.0, 1.0, 31)
        series = DeviationSeries(times, np.ones(31), np.zeros(31), np.zeros(31))
        report = turnpike_report(series)
        assert report.verdict == "turnpike not observed"
        assert report.envelope is None

    def test_too_short_for_plateau(self):
        times = np.array([0.0, 1.0])
        series = DeviationSeries(times, np.array([1.0, 0.5]), np.zeros(2), np.zeros(2))
        report = turnpike_report(series)
        assert not report.observed
        assert any("too short" in note for note in report.notes)

    def test_integral_measure(self):
        times = np.linspace(0.0, 2.0, 201)
        assert integral_turnpike_measure(times, np.ones(201)) == pytest.approx(2.0)


class TestDeviations:
    def test_combine_is_root_sum_square(self):
        times = np.linspace(0.0, 1.0, 3)
        a = DeviationSeries(times, np.full(3, 3.0), np.zeros(3), np.ones(3))
        b = DeviationSeries(times, np.full(3, 4.0), np.zeros(3), np.ones(3))
        combined = combine_deviations([a, b])
        np.testing.assert_allclose(combined.state, 5.0)
        np.testing.assert_allclose(combined.adjoint, np.sqrt(2.0))

    def test_combine_rejects_mixed_grids(self):
        a = DeviationSeries(np.linspace(0, 1, 3), np.ones(3), np.ones(3), np.ones(3))
        b = DeviationSeries(np.linspace(0, 2, 3), np.ones(3), np.ones(3), np.ones(3))
        with pytest.raises(ShapeError):
            combine_deviations([a, b])
        with pytest.raises(ShapeError):
            combine_deviations([])

    def test_static_start_stays_on_static(self, small_system):
        y_d = bump(small_system.grid.ages)
        static = solve_static_lq(small_system, y_d)
        triple = solve_dynamic_lq(small_system, static[0], y_d, 2.0, 80)
        series = deviation_curves(triple, static)
        # only the free terminal adjoint pulls away from the steady triple
        assert series.state[0] == 0.0
        assert np.max(series.state[: 40]) < np.max(series.adjoint)


def test_layer_rates_match_closed_loop_decay():
    sys = ModalLTI(np.array([[0.5]]), np.array([[1.0]]), weight=2.0)
    y_d = np.array([1.0])
    static = solve_static_lq(sys, y_d)
    triple = solve_dynamic_lq(sys, np.zeros(1), y_d, 12.0, 1200, terminal="half_norm")
    series = deviation_curves(triple, static)
    left, right, _ = fit_exponential_rates(series.times, series.total)
    rate = closed_loop_rate(sys, solve_are(sys).E)
    assert rate == pytest.approx(1.5, rel=1e-10)
    assert left.accepted and right.accepted
    assert abs(left.nu - rate) <= 0.2 * rate
    assert abs(right.nu - rate) <= 0.2 * rate


def test_horizon_sweep_ratio():
    sweep = horizon_sweep(lambda T: 1.0 + 1.0 / T, [1.0, 2.0, 4.0])
    assert sweep.ratio == pytest.approx(1.6)
    assert sweep.bound == pytest.approx(2.0)


@pytest.mark.slow
def test_integral_measure_stays_bounded(small_system):
    y_d = bump(small_system.grid.ages)
    y0 = bump(small_system.grid.ages, center=0.3, width=0.1)
    static = solve_static_lq(small_system, y_d)

    def measure(T):
        triple = solve_dynamic_lq(small_system, y0, y_d, T, int(40 * T))
        series = deviation_curves(triple, static)
        report = turnpike_report(series)
        assert report.plateau < report.peak
        return report.integral_measure

    assert horizon_sweep(measure, [4.0, 8.0]).ratio < 1.5


def drift_from(sys, y0, y_bar, T, n_steps):
    """Deviations e(t_j) = e^{t_j A}(y0 - y_bar) on a uniform grid."""
    step = expm(T / n_steps * sys.A)
    e = [y0 - y_bar]
    for _ in range(n_steps):
        e.append(step @ e[-1])
    return np.array(e)


class TestDissipativity:
    def test_strictly_dissipative(self, small_system):
        y_d = bump(small_system.grid.ages)
        static = solve_static_lq(small_system, y_d)
        rng = np.random.default_rng(7)
        for _ in range(20):
            y0 = rng.normal(size=small_system.n)
            check = dissipativity_check(small_system, y0, static, 2.0, n_steps=100, y_d=y_d)
            assert check.strictly_dissipative
            assert check.min_slack >= -1e-8

    def test_slack_is_penalty_plus_terminal_supply(self, small_system):
        y_d = bump(small_system.grid.ages)
        y_bar, v_bar, p_bar = solve_static_lq(small_system, y_d)
        y0 = np.random.default_rng(3).normal(size=small_system.n)
        check = dissipativity_check(small_system, y0, (y_bar, v_bar, p_bar), 2.0, n_steps=100, y_d=y_d)
        y_T = y_bar + drift_from(small_system, y0, y_bar, 2.0, 100)[-1]
        expected = check.penalty + check.times * float(y_T @ y_T)
        scale = max(1.0, float(np.max(np.abs(check.supply))))
        np.testing.assert_allclose(check.slack, expected, rtol=0.0, atol=1e-8 * scale)

    def test_literal_storage_agrees_for_zero_target(self, small_system):
        static = solve_static_lq(small_system)
        np.testing.assert_allclose(static[0], 0.0, atol=1e-12)
        y0 = np.random.default_rng(11).normal(size=small_system.n)
        check = dissipativity_check(small_system, y0, static, 1.5, n_steps=80)
        np.testing.assert_allclose(check.slack_literal, check.slack, atol=1e-9)

    def test_literal_storage_gap_on_nonzero_target(self, small_system):
        y_d = bump(small_system.grid.ages)
        y_bar, v_bar, p_bar = solve_static_lq(small_system, y_d)
        N = small_system.weight
        y0 = y_bar + 0.5
        T, n_steps = 1.0, 2000
        check = dissipativity_check(small_system, y0, (y_bar, v_bar, p_bar), T, n_steps=n_steps, y_d=y_d)
        e = drift_from(small_system, y0, y_bar, T, n_steps)
        moment = cumulative_trapezoid(e, check.times, axis=0, initial=0.0)
        expected = (N + 2.0) * moment @ (y_bar - y_d)
        gap = check.slack_literal - check.slack
        assert np.max(np.abs(expected)) > 1e-6
        np.testing.assert_allclose(gap, expected, rtol=1e-3, atol=1e-4 * np.max(np.abs(expected)))

    def test_storage_scale(self, small_system):
        static = solve_static_lq(small_system, bump(small_system.grid.ages))
        check = dissipativity_check(small_system, np.zeros(small_system.n), static, 1.0, n_steps=10)
        assert check.storage_scale == pytest.approx(-2.0 / small_system.weight)
        np.testing.assert_allclose(check.storage, check.storage_scale * check.storage_literal)

    def test_shape_error(self, small_system):
        static = solve_static_lq(small_system)
        with pytest.raises(ShapeError):
            dissipativity_check(small_system, np.zeros(3), static, 1.0)
