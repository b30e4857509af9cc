"""Explicit null controls, their verification, the short-horizon obstruction and the band limit."""

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import bump, make_model
from demographics import FertilityRate, MortalityRate, normalize_fertility, survival
from errors import DomainError, PreconditionError
from nullcontrol import (DEFAULT_EPSILONS, birth_controlled_state, birth_null_control,
                         control_norm_bound, distributed_controlled_state,
                         distributed_null_control, epsilon_limit_study, fertile_integrals,
                         restrict_control, short_horizon_obstruction, verify_null_control)
from transport import ControlSignal, evolve_controlled, evolve_uncontrolled


@pytest.fixture(scope="module")
def gap_rates():
    """Fertility vanishing below 0.4, rescaled to R = 0.8."""
    mu = MortalityRate()
    return mu, normalize_fertility(FertilityRate(support_floor=0.4), mu, 0.8)


def relative_residual(y0, control, model):
    report = verify_null_control(y0, control, model)
    return report.final_norm / model.grid.norm(y0), report


class TestBirthControl:
    def test_nulls_baseline_scenario(self, baseline_model, baseline_field):
        control = birth_null_control(baseline_field, 1.25, baseline_model)
        residual, report = relative_residual(baseline_field, control, baseline_model)
        assert residual <= 1e-2
        assert report.within_bound
        assert report.control_norm <= report.bound + 5 * baseline_model.grid.da

    @pytest.mark.slow
    def test_residual_is_first_order(self, baseline_rates):
        residuals = []
        for n_cells in (200, 400):
            model = make_model(baseline_rates, n_cells)
            y0 = np.ones(model.grid.n_nodes)
            residuals.append(relative_residual(y0, birth_null_control(y0, 1.25, model), model)[0])
        assert residuals[0] > 0.0
        assert 0.3 < residuals[1] / residuals[0] < 0.7

    def test_matches_fertile_integral_quadrature(self, baseline_rates):
        model = make_model(baseline_rates, 100)
        mu, beta = baseline_rates
        grid = model.grid
        y0 = bump(grid.ages)
        B = fertile_integrals(y0, model)[0]
        m = 30
        s = m * grid.da
        ages = grid.ages[m:]
        integrand = beta(ages) * survival(mu, ages) / survival(mu, ages - s) * y0[:grid.n_nodes - m]
        explicit = np.sum(0.5 * grid.da * (integrand[1:] + integrand[:-1]))
        assert B[m] == pytest.approx(explicit, rel=1e-10)
        exact, _ = quad(lambda z: beta(z) * survival(mu, z) / survival(mu, z - s)
                        * np.exp(-((z - s - 0.5) / 0.15) ** 2), s, 1.0, limit=200)
        assert B[m] == pytest.approx(exact, rel=5e-3)

    def test_control_vanishes_after_A(self, baseline_model, baseline_field):
        control = birth_null_control(baseline_field, 1.25, baseline_model)
        after = control.times > baseline_model.grid.A + 1e-12
        assert not np.any(control.values[:, after])

    def test_zero_state_needs_zero_control(self, baseline_model):
        y0 = np.zeros((baseline_model.K, baseline_model.grid.n_nodes))
        control = birth_null_control(y0, 1.25, baseline_model)
        assert control.norm() == 0.0
        assert verify_null_control(y0, control, baseline_model).final_norm == 0.0

    def test_horizon_must_exceed_A(self, baseline_model, baseline_field):
        with pytest.raises(PreconditionError):
            birth_null_control(baseline_field, 1.0, baseline_model)

    def test_controlled_state_is_zero_after_A(self, baseline_model, baseline_field):
        assert not np.any(birth_controlled_state(baseline_field, 1.1, baseline_model))

    def test_norm_bound_formula(self, baseline_model, baseline_field):
        expected = baseline_model.fertility.sup_norm() / np.sqrt(2.0) * baseline_model.grid.norm(baseline_field)
        assert control_norm_bound(baseline_field, baseline_model) == pytest.approx(expected)


class TestDistributedControl:
    def test_nulls_at_T_equal_A_and_converges(self, gap_rates):
        residuals = []
        for n_cells in (100, 200):
            model = make_model(gap_rates, n_cells, (0.0, np.pi ** 2))
            y0 = np.stack([bump(model.grid.ages, 0.6), 0.5 * bump(model.grid.ages, 0.6)])
            control = distributed_null_control(y0, 0.2, 1.0, model)
            residual, report = relative_residual(y0, control, model)
            residuals.append(residual)
        assert residuals[1] <= 5e-2
        assert residuals[1] < 0.7 * residuals[0]

    def test_support_stays_in_band(self, gap_rates):
        model = make_model(gap_rates, 50)
        control = distributed_null_control(bump(model.grid.ages, 0.6), 0.2, 1.0, model)
        above = model.grid.ages > 0.2 + 1e-12
        assert not np.any(control.values[:, :, above])
        assert control.support == "age_band"

    def test_closed_form_state_matches_march_at_first_order(self, gap_rates):
        gaps = []
        for n_cells in (100, 200, 400):
            model = make_model(gap_rates, n_cells)
            y0 = bump(model.grid.ages, 0.6)
            control = distributed_null_control(y0, 0.2, 1.0, model)
            marched = evolve_controlled(y0, control, 0.5, model).final
            closed = distributed_controlled_state(y0, 0.2, 1.0, 0.5, model)
            gaps.append(model.grid.norm(marched - closed) / model.grid.norm(y0))
        assert gaps[0] > gaps[1] > gaps[2] > 0.0
        assert gaps[2] < 5e-2
        assert gaps[2] / gaps[1] < 0.7

    def test_closed_form_state_vanishes_at_A(self, gap_rates):
        model = make_model(gap_rates, 100)
        y0 = bump(model.grid.ages, 0.6)
        state = distributed_controlled_state(y0, 0.2, 1.0, 1.0, model)
        np.testing.assert_allclose(state, 0.0, atol=1e-12)

    def test_closed_form_state_at_zero_is_initial(self, gap_rates):
        model = make_model(gap_rates, 100)
        y0 = bump(model.grid.ages, 0.6)
        np.testing.assert_array_equal(distributed_controlled_state(y0, 0.2, 1.0, 0.0, model)[0], y0)

    def test_short_horizon_is_rejected(self, gap_rates):
        model = make_model(gap_rates, 50)
        with pytest.raises(PreconditionError):
            distributed_null_control(bump(model.grid.ages), 0.2, 0.8, model)

    def test_fertility_gap_required(self, baseline_rates):
        model = make_model(baseline_rates, 50)
        y0 = bump(model.grid.ages)
        with pytest.raises(PreconditionError):
            distributed_null_control(y0, 0.2, 1.0, model)
        control = distributed_null_control(y0, 0.2, 1.0, model, require_fertility_gap=False)
        assert any("fertility positive" in note for note in control.notes)

    def test_band_must_be_grid_aligned(self, gap_rates):
        model = make_model(gap_rates, 50)
        with pytest.raises(DomainError):
            distributed_null_control(bump(model.grid.ages), 0.205, 1.0, model)


class TestRestriction:
    def test_full_domain_is_unchanged(self, baseline_model, baseline_field, basis):
        control = birth_null_control(baseline_field, 1.25, baseline_model)
        assert restrict_control(control, basis, (0.0, basis.L)) is control

    def test_subdomain_couples_modes(self, baseline_model, basis):
        y0 = np.zeros((baseline_model.K, baseline_model.grid.n_nodes))
        y0[0] = bump(baseline_model.grid.ages)
        control = birth_null_control(y0, 1.25, baseline_model, basis=basis, omega=(0.0, 0.5))
        assert control.omega == (0.0, 0.5)
        assert np.any(control.values[1])
        assert any("restricted" in note for note in control.notes)


class TestObstruction:
    @pytest.fixture(scope="class")
    def setup(self, baseline_rates):
        model = make_model(baseline_rates, 100)
        ages = model.grid.ages
        y0 = np.where((ages > 0.2 + 1e-12) & (ages <= 0.5 + 1e-12), 1.0, 0.0)
        return model, y0

    def test_witness_is_positive_and_control_independent(self, setup):
        model, y0 = setup
        grid = model.grid
        witness = short_horizon_obstruction(y0, 0.2, 0.5, model)
        assert witness.norm > 0.0
        assert not witness.degenerate
        assert witness.window == pytest.approx((0.7, 1.0))

        rng = np.random.default_rng(0)
        n_steps = grid.steps_for(0.5)
        band = grid.ages <= 0.2 + 1e-12
        window = grid.ages > 0.7 + 1e-12
        free = evolve_uncontrolled(y0, 0.5, model).final
        np.testing.assert_allclose(free[:, window], witness.profile[:, window], rtol=1e-10, atol=1e-14)
        for _ in range(100):
            values = np.zeros((1, n_steps + 1, grid.n_nodes))
            values[:, :, band] = rng.normal(size=(1, n_steps + 1, int(band.sum())))
            control = ControlSignal("age_band", values, grid.times(n_steps), grid, a0=0.2)
            final = evolve_controlled(y0, control, 0.5, model).final
            np.testing.assert_allclose(final[:, window], free[:, window], rtol=0, atol=1e-12)

    def test_degenerate_when_initial_state_is_young(self, setup):
        model, _ = setup
        ages = model.grid.ages
        y0 = np.where(ages <= 0.2, 1.0, 0.0)
        witness = short_horizon_obstruction(y0, 0.2, 0.5, model)
        assert witness.degenerate
        assert witness.norm == 0.0

    def test_constant_profile_norm(self):
        mu = MortalityRate("constant", rate=0.0)
        beta = FertilityRate("constant", rate=0.0)
        model = make_model((mu, beta), 200)
        y0 = np.where(model.grid.ages > 0.2 + 1e-12, 1.0, 0.0)
        witness = short_horizon_obstruction(y0, 0.2, 0.5, model)
        # ages (0.7, 1]: exact squared norm 0.3, trapezoid loses half a cell
        assert witness.norm ** 2 == pytest.approx(0.3 - 0.5 * model.grid.da, abs=model.grid.da)

    def test_requires_short_horizon(self, setup):
        model, y0 = setup
        with pytest.raises(DomainError):
            short_horizon_obstruction(y0, 0.2, 0.9, model)


class TestEpsilonLimit:
    @pytest.mark.slow
    def test_gaps_shrink_with_band(self, gap_rates):
        model = make_model(gap_rates, 200, (0.0, np.pi ** 2))
        y0 = np.stack([bump(model.grid.ages, 0.6), 0.5 * bump(model.grid.ages, 0.6)])
        study = epsilon_limit_study(y0, DEFAULT_EPSILONS, 1.0, model)
        assert not study.skipped
        assert [row.eps for row in study.rows] == list(DEFAULT_EPSILONS)
        assert np.all(np.diff(study.pairing_gaps) < 0)
        for t in study.sample_times:
            assert np.all(np.diff(study.state_gaps(t)) < 0)

    def test_inadmissible_band_is_skipped(self, gap_rates):
        model = make_model(gap_rates, 50)
        study = epsilon_limit_study(bump(model.grid.ages, 0.6), [0.5, 0.2], 1.0, model)
        assert study.skipped == [0.5]
        assert len(study.rows) == 1
        assert "skipped" in study.notes[0]
