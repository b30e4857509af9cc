#!/usr/bin/env python3
"""
Explicit Null Controls
======================

Closed-form controls that drive every spatial mode of the population to
zero, evaluated on the characteristic grid of transport.py.

CONTROLS:
    distributed   v(a, t) supported on ages [0, a0]; needs beta = 0 on (0, a0)
                  and nulls the state at T = A (state stays null afterwards)
    birth         v(t) added to the newborn value; nulls the state for T > A

Along the characteristic t - a = s >= 0 the state is

    y(a, t) = pi(a) e^{-lambda a} [ b(s) - B(s) Cum(min(a, a0)) / D(s) ]

with B(s) the fertile integral over the free flow, Cum the cumulative
integral of e^{lambda z} / pi(z) and D(s) = Cum(min(a0, A - s)). Above the
diagonal (t < a) the state is the uncontrolled free flow.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from errors import DomainError, PreconditionError
from spectral import NeumannBasis, heat_propagate, indicator_operator, is_full_domain
from transport import (ControlSignal, ModalModel, evolve_controlled, free_flow)

logger = logging.getLogger(__name__)

OBSTRUCTION_CITATION = "short horizons T < A - a0 are not null-controllable"
DISTRIBUTED_CITATION = "distributed null control needs T > A - a0"
BIRTH_CITATION = "birth null control needs T > A"
SUPPORT_CITATION = "distributed null control needs beta = 0 on (0, a0)"

DEFAULT_EPSILONS = (0.4, 0.2, 0.1, 0.05)


# ================================================================
# RESULT RECORDS
# ================================================================

@dataclass
class NullControlReport:
    """Outcome of feeding a synthesized control to the transport march."""
    support: str
    horizon: float
    final_norm: float
    control_norm: float
    bound: float
    per_mode_residuals: np.ndarray
    within_bound: bool
    notes: List[str] = field(default_factory=list)

    def to_lines(self) -> List[str]:
        lines = [
            f"support = {self.support}",
            f"horizon = {self.horizon:.6g}",
            f"final_state_norm = {self.final_norm:.6e}",
            f"control_norm = {self.control_norm:.6e}",
            f"norm_bound = {self.bound:.6e}",
            f"within_bound = {str(self.within_bound).lower()}",
        ]
        for k, r in enumerate(self.per_mode_residuals):
            lines.append(f"residual_mode_{k} = {r:.6e}")
        lines.extend(f"note = {n}" for n in self.notes)
        return lines


@dataclass
class ObstructionWitness:
    """Part of the state at T that no control supported on [0, a0] reaches."""
    profile: np.ndarray
    window: Tuple[float, float]
    norm: float
    degenerate: bool = False
    notes: List[str] = field(default_factory=list)


@dataclass
class EpsilonRow:
    eps: float
    pairing_gap: float
    state_gaps: Dict[float, float]
    control_norm: float


@dataclass
class EpsilonStudy:
    rows: List[EpsilonRow]
    sample_times: Tuple[float, ...]
    skipped: List[float] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def pairing_gaps(self) -> np.ndarray:
        return np.array([r.pairing_gap for r in self.rows])

    def state_gaps(self, t: float) -> np.ndarray:
        return np.array([r.state_gaps[t] for r in self.rows])


# ================================================================
# SHARED QUADRATURES
# ================================================================

def _tail_weights(n_nodes: int, da: float, m: int) -> np.ndarray:
    """Trapezoid weights of nodes m..N (zero when fewer than two nodes)."""
    w = np.zeros(n_nodes)
    if m < n_nodes - 1:
        w[m:] = da
        w[m] *= 0.5
        w[-1] *= 0.5
    return w


def fertile_integrals(y0: np.ndarray, model: ModalModel) -> np.ndarray:
    """
    B_k(s_m) = int_{s}^{A} beta(z) [pi(z)/pi(z - s)] e^{-lambda_k s} y0_k(z - s) dz
    for s_m = m * da, m = 0..N.

    Returns:
        array (K, N + 1); B vanishes for m = N
    """
    grid = model.grid
    flow = free_flow(y0, model, grid.n_cells)
    out = np.zeros((model.K, grid.n_nodes))
    for m in range(grid.n_nodes):
        w = _tail_weights(grid.n_nodes, grid.da, m) * model.beta_nodes
        out[:, m] = flow[:, m] @ w
    return out


def _band_index(model: ModalModel, a0: float) -> int:
    j0 = model.grid.index_of(a0)
    if abs(j0 * model.grid.da - a0) > 1e-9:
        raise DomainError(f"a0={a0} is not a multiple of the age step {model.grid.da}")
    if j0 < 1:
        raise DomainError(f"a0={a0} must cover at least one age cell")
    if j0 >= model.grid.n_cells:
        raise DomainError(f"a0={a0} must be below the lifespan A={model.grid.A}")
    return j0


def _weighted_cumulative(model: ModalModel, j0: int) -> np.ndarray:
    """Cum_k[j] = int_0^{a_j} e^{lambda_k z} / pi(z) dz for j = 0..j0."""
    ages = model.grid.ages[:j0 + 1]
    integrand = np.exp(np.outer(model.eigenvalues, ages)) / model.survival_nodes[:j0 + 1]
    return cumulative_trapezoid(integrand, ages, axis=1, initial=0.0)


def _check_fertility_gap(model: ModalModel, j0: int) -> bool:
    return bool(np.all(model.beta_nodes[1:j0] == 0.0))


# ================================================================
# DISTRIBUTED CONTROL ON [0, a0]
# ================================================================

def distributed_null_control(y0: np.ndarray, a0: float, T: float, model: ModalModel,
                             basis: Optional[NeumannBasis] = None,
                             omega: Optional[Tuple[float, float]] = None,
                             require_fertility_gap: bool = True) -> ControlSignal:
    """
    Control on the age band [0, a0] that nulls every mode at T = A.

    v(a_i, t_n) = -B(s) / D(s) for s = t_n - a_i >= 0 and a_i <= min(a0, A - s),
    zero elsewhere.

    Args:
        y0: modal field (K, N_a + 1)
        a0: upper age of the control band (grid-aligned)
        T: horizon; must exceed A - a0
        model: transport model
        basis, omega: restrict the control to omega when omega is a proper
            sub-interval (mode-coupled)
        require_fertility_gap: raise PreconditionError unless beta = 0 on
            (0, a0); when False the formula is still evaluated and a note
            records the violation

    Returns:
        ControlSignal with support "age_band"
    """
    y0 = model.as_field(y0)
    grid = model.grid
    if T <= grid.A - a0 + 1e-12:
        raise PreconditionError(f"Horizon T={T} does not exceed A - a0 = {grid.A - a0:.6g}",
                                citation=DISTRIBUTED_CITATION)
    j0 = _band_index(model, a0)
    notes = []
    if not _check_fertility_gap(model, j0):
        if require_fertility_gap:
            raise PreconditionError(f"Fertility is positive below a0={a0}", citation=SUPPORT_CITATION)
        notes.append(f"fertility positive below a0={a0}; null property not guaranteed")
        logger.warning(notes[-1])
    if T < grid.A - 1e-12:
        notes.append(f"horizon {T:.6g} < A; the control nulls the state only from t = A on")
        logger.info(notes[-1])

    n_steps = grid.steps_for(T)
    N = grid.n_cells
    B = fertile_integrals(y0, model)
    cum = _weighted_cumulative(model, j0)
    values = np.zeros((model.K, n_steps + 1, grid.n_nodes))
    for n in range(min(n_steps, N) + 1):
        for i in range(min(n, j0) + 1):
            m = n - i
            top = min(j0, N - m)
            if i > top or top == 0:
                continue
            values[:, n, i] = -B[:, m] / cum[:, top]

    control = ControlSignal("age_band", values, grid.times(n_steps), grid, a0=a0, omega=omega, notes=notes)
    if basis is not None and omega is not None:
        control = restrict_control(control, basis, omega)
    logger.debug("Distributed control: a0=%.4g T=%.4g norm=%.4e", a0, T, control.norm())
    return control


def distributed_controlled_state(y0: np.ndarray, a0: float, T: float, t: float,
                                 model: ModalModel) -> np.ndarray:
    """
    Closed-form state at time t under distributed_null_control(y0, a0, T).

    Returns:
        modal field (K, N_a + 1)
    """
    y0 = model.as_field(y0)
    grid = model.grid
    if T <= grid.A - a0 + 1e-12:
        raise PreconditionError(f"Horizon T={T} does not exceed A - a0 = {grid.A - a0:.6g}",
                                citation=DISTRIBUTED_CITATION)
    if t < 0 or t > T + 1e-12:
        raise DomainError(f"Evaluation time t={t} outside [0, {T}]")
    j0 = _band_index(model, a0)
    n = grid.steps_for(t)
    N = grid.n_cells
    flow = free_flow(y0, model, n)[:, n]
    if n == 0:
        return flow
    B = fertile_integrals(y0, model)
    cum = _weighted_cumulative(model, j0)
    decay = np.stack([heat_propagate(np.ones(model.K), a, model) for a in grid.ages], axis=1)
    decay *= model.survival_nodes
    state = flow.copy()
    for i in range(min(n, N) + 1):
        m = n - i
        if m > N:
            state[:, i] = 0.0
            continue
        birth_value = y0[:, 0] if m == 0 else B[:, m]
        top = min(j0, N - m)
        if top == 0:
            state[:, i] = birth_value * decay[:, i] if m == 0 else 0.0
            continue
        spent = B[:, m] * cum[:, min(i, top)] / cum[:, top]
        state[:, i] = decay[:, i] * (birth_value - spent)
    return state


# ================================================================
# BIRTH CONTROL
# ================================================================

def birth_null_control(y0: np.ndarray, T: float, model: ModalModel,
                       basis: Optional[NeumannBasis] = None,
                       omega: Optional[Tuple[float, float]] = None) -> ControlSignal:
    """
    v_k(t) = -int_t^A beta(a) [pi(a)/pi(a - t)] e^{-lambda_k t} y0_k(a - t) da

    for t < A and 0 for t >= A.
    """
    y0 = model.as_field(y0)
    grid = model.grid
    if T <= grid.A + 1e-12:
        raise PreconditionError(f"Horizon T={T} does not exceed A={grid.A}", citation=BIRTH_CITATION)
    n_steps = grid.steps_for(T)
    B = fertile_integrals(y0, model)
    values = np.zeros((model.K, n_steps + 1))
    upto = min(n_steps, grid.n_cells) + 1
    values[:, :upto] = -B[:, :upto]
    control = ControlSignal("birth", values, grid.times(n_steps), grid, omega=omega)
    if basis is not None and omega is not None:
        control = restrict_control(control, basis, omega)
    return control


def birth_controlled_state(y0: np.ndarray, t: float, model: ModalModel) -> np.ndarray:
    """Free flow above the diagonal t <= a, exactly zero below it."""
    if t < 0:
        raise DomainError(f"Evaluation time must be nonnegative, got {t}")
    n = model.grid.steps_for(t)
    return free_flow(y0, model, n)[:, n]


def control_norm_bound(y0: np.ndarray, model: ModalModel) -> float:
    """K(A) ||y0|| with K(A) = ||beta||_inf A / sqrt(2)."""
    y0 = model.as_field(y0)
    k_A = model.fertility.sup_norm() * model.grid.A / np.sqrt(2.0)
    return float(k_A * model.grid.norm(y0))


# ================================================================
# SPATIAL RESTRICTION AND VERIFICATION
# ================================================================

def restrict_control(control: ControlSignal, basis: NeumannBasis,
                     omega: Tuple[float, float]) -> ControlSignal:
    """Apply the indicator of omega to the mode axis (identity when omega = (0, L))."""
    if is_full_domain(basis, omega):
        return control
    if control.values.shape[0] != basis.K:
        raise DomainError(f"Control has {control.values.shape[0]} modes, basis has {basis.K}")
    M = indicator_operator(basis, omega)
    values = np.tensordot(M, control.values, axes=(1, 0))
    notes = list(control.notes) + [f"restricted to omega=({omega[0]:.4g}, {omega[1]:.4g}); modes coupled"]
    logger.info(notes[-1])
    return ControlSignal(control.support, values, control.times, control.grid,
                         a0=control.a0, omega=omega, notes=notes)


def verify_null_control(y0: np.ndarray, control: ControlSignal, model: ModalModel) -> NullControlReport:
    """March y0 under the control and collect the final-state diagnostics."""
    y0 = model.as_field(y0)
    trajectory = evolve_controlled(y0, control, control.horizon, model)
    grid = model.grid
    residuals = np.sqrt(np.sum(trajectory.final ** 2 * grid.weights, axis=1))
    bound = control_norm_bound(y0, model)
    control_norm = control.norm()
    report = NullControlReport(
        support=control.support,
        horizon=control.horizon,
        final_norm=float(np.sqrt(np.sum(residuals ** 2))),
        control_norm=control_norm,
        bound=bound,
        per_mode_residuals=residuals,
        within_bound=bool(control_norm <= bound * (1.0 + grid.da) + grid.da),
        notes=list(control.notes),
    )
    logger.info("Null control (%s): final norm %.3e, control norm %.3e, bound %.3e",
                report.support, report.final_norm, report.control_norm, report.bound)
    return report


# ================================================================
# OBSTRUCTION
# ================================================================

def short_horizon_obstruction(y0: np.ndarray, a0: float, T: float, model: ModalModel) -> ObstructionWitness:
    """
    Residual y(a, T) on (T + a0, A] that no control on [0, a0] can alter.

    The characteristics reaching those ages at time T start from y0 on
    (a0, A - T] and never cross the control band.
    """
    y0 = model.as_field(y0)
    grid = model.grid
    if not 0.0 < T < grid.A - a0:
        raise DomainError(f"Obstruction needs 0 < T < A - a0 = {grid.A - a0:.6g}, got T={T}")
    n = grid.steps_for(T)
    flow = free_flow(y0, model, n)[:, n]
    inside = grid.ages > T + a0 + 1e-12
    profile = np.where(inside[None, :], flow, 0.0)
    norm = grid.norm(profile)
    witness = ObstructionWitness(profile, (T + a0, grid.A), norm)
    if norm == 0.0:
        witness.degenerate = True
        witness.notes.append("initial state vanishes on the unreachable window; witness is degenerate")
        logger.warning(witness.notes[-1])
    return witness


# ================================================================
# VANISHING-BAND LIMIT
# ================================================================

def default_test_functions(A: float, T: float) -> List[Callable[[np.ndarray, np.ndarray], np.ndarray]]:
    """Smooth phi(a, t) used for the weak pairing."""
    return [
        lambda a, t: np.ones(np.broadcast(a, t).shape),
        lambda a, t: np.cos(np.pi * t / T) * np.exp(-a / A),
        lambda a, t: np.sin(np.pi * t / T) * (1.0 + a / A),
    ]


def epsilon_limit_study(y0: np.ndarray, eps_list: Sequence[float], T: float, model: ModalModel,
                        sample_times: Sequence[float] = (0.25, 0.5),
                        test_functions: Optional[Sequence[Callable]] = None) -> EpsilonStudy:
    """
    Compare distributed controls on [0, eps] with the birth control as eps shrinks.

    For each eps: the gap between int int v^eps phi and int v_1 phi(0, t), and
    the L2 gap between the two controlled states at the sample times.
    """
    y0 = model.as_field(y0)
    grid = model.grid
    phis = list(test_functions) if test_functions is not None else default_test_functions(grid.A, T)
    n_steps = grid.steps_for(T)
    times = grid.times(n_steps)
    A_mesh, T_mesh = np.meshgrid(grid.ages, times)

    birth_values = np.zeros((model.K, n_steps + 1))
    upto = min(n_steps, grid.n_cells) + 1
    birth_values[:, :upto] = -fertile_integrals(y0, model)[:, :upto]
    limit_states = {t: birth_controlled_state(y0, t, model) for t in sample_times}

    study = EpsilonStudy(rows=[], sample_times=tuple(sample_times))
    for eps in eps_list:
        try:
            control = distributed_null_control(y0, eps, T, model)
        except (PreconditionError, DomainError) as exc:
            study.skipped.append(eps)
            study.notes.append(f"eps={eps} skipped: {exc}")
            logger.warning(study.notes[-1])
            continue
        gap = 0.0
        for phi in phis:
            weights = phi(A_mesh, T_mesh)
            band = trapezoid(np.sum(control.values * weights * grid.weights, axis=2), times, axis=1)
            limit = trapezoid(birth_values * phi(np.zeros_like(times), times), times, axis=1)
            gap = max(gap, float(np.max(np.abs(band - limit))))
        state_gaps = {}
        for t in sample_times:
            y_eps = distributed_controlled_state(y0, eps, T, t, model)
            state_gaps[t] = grid.norm(y_eps - limit_states[t])
        study.rows.append(EpsilonRow(eps, gap, state_gaps, control.norm()))
        logger.debug("eps=%.4g pairing gap %.3e", eps, gap)
    return study
