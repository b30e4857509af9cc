#!/usr/bin/env python3
"""
Characteristic Transport
========================

Per-mode evolution of the age-structured state

    dy_k/dt + dy_k/da + (mu(a) + lambda_k) y_k = source
    y_k(0, t) = int_0^A beta(a) y_k(a, t) da  (+ birth control)

on an age grid whose time step equals the age step, so every grid value
moves exactly one cell per step along its characteristic:

    y(a_{i+1}, t_{n+1}) = [pi(a_{i+1}) / pi(a_i)] e^{-lambda_k da} y(a_i, t_n)

Only the renewal integral (trapezoid) and the source integral along a cell
(trapezoid) are discretised. The newborn value uses the previous step's
a = 0 entry inside the renewal sum, so the closure is explicit.

FIELD SHAPES:
    modal field    (K, N_a + 1)            one age profile per mode
    trajectory     (K, n_t, N_a + 1)
    birth control  (K, n_t)
    band control   (K, n_t, N_a + 1)
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from demographics import FertilityRate, MortalityRate, survival, survival_ratio
from errors import DomainError, ShapeError
from spectral import heat_propagate

logger = logging.getLogger(__name__)

CONTROL_SUPPORTS = ("age_band", "birth")


# ================================================================
# GRID AND MODEL
# ================================================================

@dataclass(frozen=True, eq=False)
class AgeGrid:
    """Uniform grid a_i = i * da on [0, A]; marches use dt = da."""
    A: float
    n_cells: int

    def __post_init__(self):
        if self.A <= 0:
            raise DomainError(f"Lifespan A must be positive, got {self.A}")
        if self.n_cells < 2:
            raise DomainError(f"Age grid needs at least 2 cells, got {self.n_cells}")

    @property
    def da(self) -> float:
        return self.A / self.n_cells

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @property
    def ages(self) -> np.ndarray:
        return np.linspace(0.0, self.A, self.n_nodes)

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.n_nodes, self.da)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    def steps_for(self, horizon: float) -> int:
        """Number of characteristic steps covering [0, horizon]."""
        if horizon < 0:
            raise DomainError(f"Horizon must be nonnegative, got {horizon}")
        n = int(round(horizon / self.da))
        if abs(n * self.da - horizon) > 1e-9 * max(1.0, horizon):
            logger.debug("Horizon %.6g snapped to grid value %.6g", horizon, n * self.da)
        return n

    def index_of(self, age: float) -> int:
        if age < -1e-12 or age > self.A + 1e-12:
            raise DomainError(f"Age {age} outside [0, {self.A}]")
        return int(round(age / self.da))

    def times(self, n_steps: int) -> np.ndarray:
        return np.arange(n_steps + 1) * self.da

    def norm(self, values: np.ndarray) -> float:
        """L2 norm over ages (trapezoid) summed over any leading axes."""
        values = np.asarray(values, dtype=float)
        return float(np.sqrt(np.sum(values ** 2 * self.weights)))


@dataclass(frozen=True, eq=False)
class ModalModel:
    """Demography + spatial eigenvalues + age grid, with per-cell factors cached."""
    grid: AgeGrid
    mortality: MortalityRate
    fertility: FertilityRate
    eigenvalues: np.ndarray
    modes: Optional[np.ndarray] = None
    cell_ratio: np.ndarray = field(init=False, repr=False)
    beta_nodes: np.ndarray = field(init=False, repr=False)
    survival_nodes: np.ndarray = field(init=False, repr=False)
    heat_step: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = self.grid.A
        if abs(self.mortality.A - A) > 1e-12 or abs(self.fertility.A - A) > 1e-12:
            raise DomainError("Grid, mortality and fertility must share the lifespan A")
        lam = np.atleast_1d(np.asarray(self.eigenvalues, dtype=float))
        if np.any(lam < 0):
            raise DomainError("Spatial eigenvalues must be nonnegative")
        modes = np.arange(lam.size) if self.modes is None else np.asarray(self.modes, dtype=int)
        if modes.shape != lam.shape:
            raise ShapeError("modes and eigenvalues must have equal length")
        ages = self.grid.ages
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "cell_ratio", survival_ratio(self.mortality, ages[1:], self.grid.da))
        object.__setattr__(self, "beta_nodes", self.fertility(ages))
        object.__setattr__(self, "survival_nodes", survival(self.mortality, ages))
        object.__setattr__(self, "heat_step", heat_propagate(np.ones(lam.size), self.grid.da, self))

    @property
    def K(self) -> int:
        return self.eigenvalues.size

    def single_mode(self, index: int) -> "ModalModel":
        """Model restricted to one of its modes."""
        return ModalModel(self.grid, self.mortality, self.fertility,
                          self.eigenvalues[index:index + 1], self.modes[index:index + 1])

    def as_field(self, y: np.ndarray) -> np.ndarray:
        """Promote a single age profile to (1, N_a + 1) and check the shape."""
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[None, :]
        if y.shape != (self.K, self.grid.n_nodes):
            raise ShapeError(f"Modal field must have shape {(self.K, self.grid.n_nodes)}, got {y.shape}")
        if not np.all(np.isfinite(y)):
            raise DomainError("Modal field has non-finite entries")
        return y


@dataclass(frozen=True, eq=False)
class ModalState:
    """Age profile of one spatial mode at one time."""
    mode: int
    values: np.ndarray
    grid: AgeGrid

    def __post_init__(self):
        if np.shape(self.values) != (self.grid.n_nodes,):
            raise ShapeError(f"ModalState needs {self.grid.n_nodes} values, got {np.shape(self.values)}")

    def norm(self) -> float:
        return self.grid.norm(self.values)


# ================================================================
# CONTROL SIGNAL
# ================================================================

@dataclass(eq=False)
class ControlSignal:
    """Time-indexed control per mode.

    support == "birth":    values (K, n_t), enters only at a = 0
    support == "age_band": values (K, n_t, N_a + 1), zero for a > a0
    """
    support: str
    values: np.ndarray
    times: np.ndarray
    grid: AgeGrid
    a0: float = 0.0
    omega: Optional[Tuple[float, float]] = None
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if self.support not in CONTROL_SUPPORTS:
            raise DomainError(f"Unknown control support '{self.support}'")
        self.values = np.asarray(self.values, dtype=float)
        n_t = np.size(self.times)
        if self.support == "birth":
            if self.values.ndim != 2 or self.values.shape[1] != n_t:
                raise ShapeError(f"Birth control needs shape (K, {n_t}), got {self.values.shape}")
        else:
            expected = (n_t, self.grid.n_nodes)
            if self.values.ndim != 3 or self.values.shape[1:] != expected:
                raise ShapeError(f"Age-band control needs shape (K, {expected[0]}, {expected[1]}), "
                                 f"got {self.values.shape}")
            outside = self.grid.ages > self.a0 + 1e-12
            if np.any(self.values[:, :, outside] != 0.0):
                raise ShapeError(f"Age-band control is nonzero above a0={self.a0}")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("Control has non-finite values")

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def per_mode_norms(self) -> np.ndarray:
        """L2(0, T) (birth) or L2((0, A) x (0, T)) (age band) norm per mode."""
        if self.support == "birth":
            return np.sqrt(trapezoid(self.values ** 2, self.times, axis=1))
        in_age = np.sum(self.values ** 2 * self.grid.weights, axis=2)
        return np.sqrt(trapezoid(in_age, self.times, axis=1))

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.per_mode_norms() ** 2)))


@dataclass(eq=False)
class Trajectory:
    model: ModalModel
    times: np.ndarray
    values: np.ndarray
    control: Optional[ControlSignal] = None

    @property
    def final(self) -> np.ndarray:
        return self.values[:, -1]

    def state(self, mode_index: int, step: int) -> ModalState:
        return ModalState(int(self.model.modes[mode_index]), self.values[mode_index, step].copy(), self.model.grid)

    def norms(self) -> np.ndarray:
        """L2 norm over modes and ages at every time node."""
        w = self.model.grid.weights
        return np.sqrt(np.sum(self.values ** 2 * w, axis=(0, 2)))

    def total_mass(self) -> np.ndarray:
        """(K, n_t) integral of y over ages."""
        return self.values @ self.model.grid.weights


@dataclass(eq=False)
class RenewalTrace:
    times: np.ndarray
    values: np.ndarray  # (K, n_t)


# ================================================================
# MARCHES
# ================================================================

def _march(y0: np.ndarray, model: ModalModel, n_steps: int,
           birth: Optional[np.ndarray] = None, band: Optional[np.ndarray] = None) -> np.ndarray:
    grid = model.grid
    K, n_a = y0.shape
    Y = np.zeros((K, n_steps + 1, n_a))
    Y[:, 0] = y0
    carry = model.heat_step[:, None] * model.cell_ratio[None, :]
    w_beta = grid.weights * model.beta_nodes
    half_da = 0.5 * grid.da
    for n in range(n_steps):
        prev = Y[:, n]
        new = Y[:, n + 1]
        new[:, 1:] = carry * prev[:, :-1]
        if band is not None:
            new[:, 1:] += half_da * (carry * band[:, n, :-1] + band[:, n + 1, 1:])
        newborn = new[:, 1:] @ w_beta[1:] + w_beta[0] * prev[:, 0]
        if birth is not None:
            newborn = newborn + birth[:, n + 1]
        new[:, 0] = newborn
    return Y


def evolve_uncontrolled(y0: np.ndarray, horizon: float, model: ModalModel) -> Trajectory:
    """
    March the free system from y0 over [0, horizon].

    Args:
        y0: modal field (K, N_a + 1) or a single profile when K == 1
        horizon: final time, snapped to the nearest multiple of da
        model: grid, rates and spatial eigenvalues

    Returns:
        Trajectory with values (K, n_t, N_a + 1)
    """
    return evolve_controlled(y0, None, horizon, model)


def evolve_controlled(y0: np.ndarray, control: Optional[ControlSignal], horizon: float,
                      model: ModalModel) -> Trajectory:
    """March with a birth control (added to the newborn value) or an age-band
    source (trapezoid along each cell's characteristic)."""
    y0 = model.as_field(y0)
    n_steps = model.grid.steps_for(horizon)
    times = model.grid.times(n_steps)
    birth = band = None
    if control is not None:
        if control.values.shape[0] != model.K or control.values.shape[1] != n_steps + 1:
            raise ShapeError(f"Control covers {control.values.shape[:2]} (modes, steps); "
                             f"march needs ({model.K}, {n_steps + 1})")
        if control.grid.n_cells != model.grid.n_cells:
            raise ShapeError("Control and model use different age grids")
        if control.support == "birth":
            birth = control.values
        else:
            band = control.values
    values = _march(y0, model, n_steps, birth=birth, band=band)
    logger.debug("Marched %d modes over %d steps", model.K, n_steps)
    return Trajectory(model, times, values, control)


def renewal_trace(trajectory: Trajectory, beta: Optional[FertilityRate] = None) -> RenewalTrace:
    """b(t_n) = trapezoid(beta * y(., t_n)) for every mode."""
    grid = trajectory.model.grid
    beta_nodes = trajectory.model.beta_nodes if beta is None else beta(grid.ages)
    values = trajectory.values @ (grid.weights * beta_nodes)
    return RenewalTrace(trajectory.times.copy(), values)


def free_flow(y0: np.ndarray, model: ModalModel, n_steps: int) -> np.ndarray:
    """
    Closed-form uncontrolled values on the region t_n <= a_i:

        y(a_i, t_n) = [pi(a_i) / pi(a_i - t_n)] e^{-lambda_k t_n} y0(a_i - t_n)

    Entries with a_i < t_n are zero.

    Returns:
        array (K, n_steps + 1, N_a + 1)
    """
    y0 = model.as_field(y0)
    grid = model.grid
    ages = grid.ages
    out = np.zeros((model.K, n_steps + 1, grid.n_nodes))
    for n in range(min(n_steps, grid.n_cells) + 1):
        t = n * grid.da
        ratio = survival_ratio(model.mortality, ages[n:], np.full(grid.n_nodes - n, t))
        decay = heat_propagate(np.ones(model.K), t, model)
        out[:, n, n:] = decay[:, None] * ratio[None, :] * y0[:, :grid.n_nodes - n]
    return out


def mass_budget_residual(trajectory: Trajectory) -> np.ndarray:
    """
    Residual of the discrete mass budget for mu = 0, lambda = 0:

        M_{n+1} = M_n - (da/2)(y^n_{N-1} + y^n_N) + (da/2)(y^n_0 + y^{n+1}_0)

    Returns:
        (K, n_t - 1) residuals
    """
    da = trajectory.model.grid.da
    Y = trajectory.values
    mass = trajectory.total_mass()
    outflow = 0.5 * da * (Y[:, :-1, -2] + Y[:, :-1, -1])
    inflow = 0.5 * da * (Y[:, :-1, 0] + Y[:, 1:, 0])
    return mass[:, 1:] - (mass[:, :-1] - outflow + inflow)


def stack_states(states: Sequence[ModalState]) -> np.ndarray:
    """Modal field from per-mode states (ordered as given)."""
    if not states:
        raise ShapeError("Need at least one ModalState")
    grid = states[0].grid
    if any(s.grid.n_cells != grid.n_cells for s in states):
        raise ShapeError("States live on different grids")
    return np.stack([s.values for s in states])
