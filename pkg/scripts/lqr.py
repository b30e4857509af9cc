#!/usr/bin/env python3
"""
Linear-Quadratic Machinery per Spatial Mode
===========================================

Each mode k of the controlled population reduces, after an upwind
discretisation in age, to the LTI system

    y' = A_d y + B_d v,     A_d = -D_a - diag(mu + lambda_k) + renewal row
                            B_d = e_0 / da

with running cost  N |y - y_d|^2 + |v|^2  and optional terminal cost |y(T)|^2.

SOLVERS:
    solve_riccati_ode     E' = N I + E A + A^T E - E B B^T E, E(0) = I (RK4)
    solve_are             Newton-Kleinman on the algebraic Riccati equation
    solve_lyapunov        M S + S M^T = Q (Kronecker for small n, Bartels-Stewart)
    build_dichotomy       block-diagonalising transform of the Hamiltonian
    solve_dynamic_lq      discretize-then-optimize, one sparse KKT solve
    solve_static_lq       steady optimality system, one dense solve
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.integrate import trapezoid
from scipy.sparse.linalg import spsolve

from demographics import FertilityRate, MortalityRate
from errors import (ConvergenceError, DichotomyError, DomainError, KKTError,
                    RiccatiDivergenceError, ShapeError, SpectrumOverlapError,
                    StaticSingularityError)
from transport import AgeGrid, ModalModel

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
ARE_TOLERANCE = 1e-10
NEWTON_MAX_ITERATIONS = 50
KRONECKER_MAX_DIM = 24
DICHOTOMY_TOLERANCE = 1e-8
RICCATI_MAX_STEP = 1e-2
RICCATI_RECORDS = 200
SEED_HORIZONS = (20.0, 100.0, 500.0)
SINGULAR_CONDITION = 1e12
TERMINAL_CHOICES = ("none", "half_norm")
ORIENTATIONS = ("left", "right")


# ================================================================
# SYSTEM
# ================================================================

@dataclass(frozen=True, eq=False)
class ModalLTI:
    """Drift A (n x n), input B (n x m), scalar state weight N."""
    A: np.ndarray
    B: np.ndarray
    weight: float = 1.0
    grid: Optional[AgeGrid] = None
    mode: int = 0
    eigenvalue: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ShapeError(f"Incompatible system shapes A{A.shape}, B{B.shape}")
        if self.weight <= 0:
            raise DomainError(f"State weight N must be positive, got {self.weight}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def G(self) -> np.ndarray:
        return self.B @ self.B.T

    def hamiltonian(self) -> np.ndarray:
        """[[A, -B B^T], [-N I, -A^T]]."""
        I = np.eye(self.n)
        return np.block([[self.A, -self.G], [-self.weight * I, -self.A.T]])


def spectral_abscissa(M: np.ndarray) -> float:
    return float(np.max(np.linalg.eigvals(M).real))


def assemble_modal_system(grid: AgeGrid, mortality: MortalityRate, fertility: FertilityRate,
                          eigenvalue: float, weight: float = 1.0, mode: int = 0) -> ModalLTI:
    """
    Upwind age transport with the renewal condition folded into row 0.

    The ghost value at a = -da is the trapezoid renewal integral plus the
    control, so row 0 gains the quadrature weights of beta divided by da and
    B_d = e_0 / da. Mortality at the last node is taken at A - da/2 when mu
    is singular at A.
    """
    if eigenvalue < 0:
        raise DomainError(f"Spatial eigenvalue must be nonnegative, got {eigenvalue}")
    ages = grid.ages
    da = grid.da
    mu = np.asarray(mortality(ages), dtype=float)
    if not np.isfinite(mu[-1]):
        mu[-1] = float(mortality(grid.A - 0.5 * da))
    beta = fertility(ages)

    n = grid.n_nodes
    A = (np.eye(n, k=-1) - np.eye(n)) / da
    A -= np.diag(mu + eigenvalue)
    A[0] += grid.weights * beta / da
    B = np.zeros((n, 1))
    B[0, 0] = 1.0 / da
    return ModalLTI(A, B, weight, grid, mode, float(eigenvalue))


def modal_systems(model: ModalModel, weight: float = 1.0) -> List[ModalLTI]:
    """One ModalLTI per mode of a transport model."""
    return [assemble_modal_system(model.grid, model.mortality, model.fertility, lam, weight, int(k))
            for k, lam in zip(model.modes, model.eigenvalues)]


def shift_system(sys: ModalLTI, alpha: float) -> ModalLTI:
    """Exponentially shifted system A - alpha I (mortality raised by alpha)."""
    return replace(sys, A=sys.A - alpha * np.eye(sys.n))


# ================================================================
# LYAPUNOV / RICCATI
# ================================================================

def solve_lyapunov(M: np.ndarray, Q: np.ndarray, orientation: str = "left") -> np.ndarray:
    """
    Solve M S + S M^T = Q ("left") or M^T S + S M = Q ("right").

    Small systems use the Kronecker form directly; larger ones use
    scipy's Bartels-Stewart solver.
    """
    if orientation not in ORIENTATIONS:
        raise DomainError(f"Unknown Lyapunov orientation '{orientation}'")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if M.shape[0] != M.shape[1] or Q.shape != M.shape:
        raise ShapeError(f"Lyapunov needs square M and Q of equal shape, got {M.shape}, {Q.shape}")
    op = M if orientation == "left" else M.T
    n = M.shape[0]
    if n <= KRONECKER_MAX_DIM:
        I = np.eye(n)
        L = np.kron(I, op) + np.kron(op, I)
        try:
            vec = np.linalg.solve(L, Q.flatten(order="F"))
        except np.linalg.LinAlgError as exc:
            raise SpectrumOverlapError(f"Kronecker Lyapunov system is singular: {exc}") from exc
        S = vec.reshape((n, n), order="F")
    else:
        S = la.solve_continuous_lyapunov(op, Q)
    if not np.all(np.isfinite(S)):
        raise SpectrumOverlapError("Lyapunov solution is not finite (spectrum of M meets that of -M^T)")
    residual = np.linalg.norm(op @ S + S @ op.T - Q)
    scale = max(np.linalg.norm(Q), np.linalg.norm(op) * np.linalg.norm(S), 1e-300)
    if residual > 1e-8 * scale:
        raise SpectrumOverlapError(f"Lyapunov residual {residual:.3e} too large; operator near singular")
    if np.allclose(Q, Q.T):
        S = 0.5 * (S + S.T)
    return S


def riccati_rhs(sys: ModalLTI, E: np.ndarray) -> np.ndarray:
    EB = E @ sys.B
    return sys.weight * np.eye(sys.n) + E @ sys.A + sys.A.T @ E - EB @ EB.T


def are_residual(sys: ModalLTI, E: np.ndarray) -> float:
    """Frobenius norm of E A + A^T E - E B B^T E + N I."""
    return float(np.linalg.norm(riccati_rhs(sys, E)))


@dataclass(eq=False)
class RiccatiTrajectory:
    """E(tau) for tau = T - t on a uniform record grid, E(0) = E0."""
    taus: np.ndarray
    values: np.ndarray
    steps: int = 0

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def at(self, tau: float) -> np.ndarray:
        """Linear interpolation between records."""
        if tau < self.taus[0] - 1e-12 or tau > self.taus[-1] + 1e-12:
            raise DomainError(f"tau={tau} outside [{self.taus[0]}, {self.taus[-1]}]")
        j = int(np.clip(np.searchsorted(self.taus, tau), 1, self.taus.size - 1))
        t0, t1 = self.taus[j - 1], self.taus[j]
        s = (tau - t0) / (t1 - t0)
        return (1.0 - s) * self.values[j - 1] + s * self.values[j]

    def symmetry_defect(self) -> float:
        return float(np.max(np.abs(self.values - np.swapaxes(self.values, 1, 2))))

    def is_positive_definite(self) -> bool:
        for E in self.values:
            try:
                np.linalg.cholesky(E)
            except np.linalg.LinAlgError:
                return False
        return True

    def monotonicity_slack(self) -> float:
        """Smallest eigenvalue of E(tau_{r+1}) - E(tau_r) over all records
        (negative when E decreases somewhere)."""
        diffs = np.diff(self.values, axis=0)
        return float(min(np.linalg.eigvalsh(D).min() for D in diffs)) if diffs.size else 0.0


def solve_riccati_ode(sys: ModalLTI, T: float, n_records: int = RICCATI_RECORDS,
                      initial: Optional[np.ndarray] = None,
                      max_step: float = RICCATI_MAX_STEP) -> RiccatiTrajectory:
    """
    RK4 march of E' = N I + E A + A^T E - E B B^T E from E(0) = I.

    The step is bounded by max_step and by 1 / (||A|| + ||B B^T E||) so the
    linearised Lyapunov operator stays inside the RK4 stability region; E is
    symmetrised after every step.

    Args:
        sys: modal system
        T: final tau
        n_records: number of record intervals on [0, T]
        initial: E(0), identity when omitted
        max_step: upper bound on the RK4 step

    Returns:
        RiccatiTrajectory with n_records + 1 matrices
    """
    if T <= 0:
        raise DomainError(f"Riccati horizon must be positive, got {T}")
    if n_records < 1:
        raise DomainError("Need at least one record interval")
    E = np.eye(sys.n) if initial is None else np.array(initial, dtype=float)
    if E.shape != (sys.n, sys.n):
        raise ShapeError(f"Initial Riccati value must be {sys.n}x{sys.n}")
    taus = np.linspace(0.0, T, n_records + 1)
    values = np.empty((n_records + 1, sys.n, sys.n))
    values[0] = E
    norm_A = np.linalg.norm(sys.A, np.inf)
    steps = 0
    for r in range(n_records):
        tau, target = taus[r], taus[r + 1]
        while tau < target - 1e-14 * max(1.0, T):
            stiff = norm_A + np.linalg.norm(sys.B @ (sys.B.T @ E), np.inf)
            h = min(max_step, 1.0 / max(stiff, 1e-300), target - tau)
            k1 = riccati_rhs(sys, E)
            k2 = riccati_rhs(sys, E + 0.5 * h * k1)
            k3 = riccati_rhs(sys, E + 0.5 * h * k2)
            k4 = riccati_rhs(sys, E + h * k3)
            E = E + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            E = 0.5 * (E + E.T)
            tau += h
            steps += 1
            if not np.all(np.isfinite(E)) or np.max(np.abs(E)) > DIVERGENCE_LIMIT:
                raise RiccatiDivergenceError(
                    f"Riccati solution diverged at tau={tau:.4g} (step {h:.3e}); reduce max_step")
        values[r + 1] = E
    logger.debug("Riccati ODE: %d RK4 steps to tau=%.4g", steps, T)
    return RiccatiTrajectory(taus, values, steps)


# ================================================================
# ALGEBRAIC RICCATI EQUATION
# ================================================================

@dataclass
class AREResult:
    E: np.ndarray
    iterations: int
    residual: float
    seed: str
    closed_loop_abscissa: float


def _newton_kleinman(sys: ModalLTI, K: np.ndarray, tol: float, max_iterations: int) -> Tuple[np.ndarray, int, float]:
    target = tol * np.linalg.norm(sys.weight * np.eye(sys.n))
    residual = are_residual(sys, K)
    for it in range(1, max_iterations + 1):
        Acl = sys.A - sys.G @ K
        KB = K @ sys.B
        rhs = -(sys.weight * np.eye(sys.n) + KB @ KB.T)
        K = solve_lyapunov(Acl, rhs, orientation="right")
        residual = are_residual(sys, K)
        logger.debug("Newton-Kleinman iteration %d: residual %.3e", it, residual)
        if residual <= target:
            return K, it, residual
    raise ConvergenceError(f"Newton-Kleinman did not converge in {max_iterations} iterations "
                           f"(residual {residual:.3e})")


def _is_stabilizing(sys: ModalLTI, K: np.ndarray) -> bool:
    return spectral_abscissa(sys.A - sys.G @ K) < 0.0


def _seeds(sys: ModalLTI, max_step: float):
    if spectral_abscissa(sys.A) < 0.0:
        yield "zero", np.zeros((sys.n, sys.n))
    for tau in SEED_HORIZONS:
        try:
            yield f"riccati_ode(tau={tau:g})", solve_riccati_ode(sys, tau, n_records=1, max_step=max_step).final
        except RiccatiDivergenceError as exc:
            logger.warning("Riccati seed at tau=%g failed: %s", tau, exc)
    yield "shift_continuation", None


def _shift_continuation(sys: ModalLTI, tol: float, max_iterations: int) -> np.ndarray:
    """Track the stabilizing solution of A - alpha I as alpha decreases to 0."""
    alpha = max(spectral_abscissa(sys.A), 0.0) + 1.0
    K = np.zeros((sys.n, sys.n))
    for s in np.linspace(1.0, 0.0, 11):
        shifted = shift_system(sys, s * alpha)
        if not _is_stabilizing(shifted, K):
            raise ConvergenceError(f"Shift continuation lost stabilizability at alpha={s * alpha:.4g}")
        K, _, _ = _newton_kleinman(shifted, K, tol, max_iterations)
    return K


def solve_are(sys: ModalLTI, tol: float = ARE_TOLERANCE,
              max_iterations: int = NEWTON_MAX_ITERATIONS,
              max_step: float = RICCATI_MAX_STEP) -> AREResult:
    """
    Stabilizing solution of E A + A^T E - E B B^T E + N I = 0.

    Newton-Kleinman from the first stabilizing seed of: zero (A stable),
    the Riccati ODE at growing horizons (RK4 step at most max_step), a
    continuation in the shift alpha. Stops once the residual is at most
    tol * ||N I||_F.
    """
    for label, seed in _seeds(sys, max_step):
        if seed is None:
            logger.info("Escalating ARE seed to shift continuation")
            K = _shift_continuation(sys, tol, max_iterations)
            E, iterations, residual = _newton_kleinman(sys, K, tol, max_iterations)
        else:
            if not _is_stabilizing(sys, seed):
                logger.info("ARE seed %s is not stabilizing; escalating", label)
                continue
            E, iterations, residual = _newton_kleinman(sys, seed, tol, max_iterations)
        abscissa = spectral_abscissa(sys.A - sys.G @ E)
        if abscissa >= 0.0:
            logger.warning("ARE solution from seed %s is not stabilizing", label)
            continue
        logger.info("ARE solved (seed %s) in %d iterations, residual %.3e", label, iterations, residual)
        return AREResult(E, iterations, residual, label, abscissa)
    raise ConvergenceError("No seed produced a stabilizing ARE solution")


def closed_loop_matrix(sys: ModalLTI, E: np.ndarray) -> np.ndarray:
    return sys.A - sys.G @ E


def closed_loop_rate(sys: ModalLTI, E: np.ndarray) -> float:
    """Decay rate nu = -max Re spec(A - B B^T E)."""
    return -spectral_abscissa(closed_loop_matrix(sys, E))


# ================================================================
# DICHOTOMY
# ================================================================

@dataclass(eq=False)
class DichotomyTransform:
    E: np.ndarray
    S: np.ndarray
    Lam: np.ndarray
    Lam_inv: np.ndarray
    residual: float
    orientation: str
    placement: str
    inverse_defect: float

    def block_form(self, ham: np.ndarray) -> np.ndarray:
        if self.placement == "inverse_first":
            return self.Lam_inv @ ham @ self.Lam
        return self.Lam @ ham @ self.Lam_inv


def build_dichotomy(sys: ModalLTI, E: np.ndarray, tol: float = DICHOTOMY_TOLERANCE) -> DichotomyTransform:
    """
    Lam = [[I, S], [E, E S + I]] with S from the Lyapunov equation of the
    closed loop and Q = B B^T; Lam^{-1} = [[I + S E, -S], [-E, I]].

    Both orientations of the Lyapunov equation and both similarity placements
    are tried; the one that block-diagonalises the Hamiltonian into
    diag(Acl, -Acl^T) is kept.
    """
    n = sys.n
    I = np.eye(n)
    Acl = closed_loop_matrix(sys, E)
    ham = sys.hamiltonian()
    target = la.block_diag(Acl, -Acl.T)
    scale = max(np.linalg.norm(ham), 1.0)
    best = None
    for orientation in ORIENTATIONS:
        S = solve_lyapunov(Acl, sys.G, orientation=orientation)
        Lam = np.block([[I, S], [E, E @ S + I]])
        Lam_inv = np.block([[I + S @ E, -S], [-E, I]])
        inverse_defect = float(np.linalg.norm(Lam @ Lam_inv - np.eye(2 * n)))
        for placement in ("inverse_first", "inverse_last"):
            candidate = DichotomyTransform(E, S, Lam, Lam_inv, 0.0, orientation, placement, inverse_defect)
            candidate.residual = float(np.linalg.norm(candidate.block_form(ham) - target)) / scale
            if best is None or candidate.residual < best.residual:
                best = candidate
    if best.residual > tol:
        raise DichotomyError(f"No Lyapunov orientation block-diagonalises the Hamiltonian "
                             f"(best relative residual {best.residual:.3e})")
    logger.info("Dichotomy: orientation=%s placement=%s residual %.3e",
                best.orientation, best.placement, best.residual)
    return best


def hamiltonian_gap(sys: ModalLTI) -> float:
    """min |Re lambda| over the Hamiltonian spectrum."""
    return float(np.min(np.abs(np.linalg.eigvals(sys.hamiltonian()).real)))


# ================================================================
# CLOSED LOOP AND FEEDBACK TRAJECTORIES
# ================================================================

@dataclass(eq=False)
class FeedbackTrajectory:
    times: np.ndarray
    states: np.ndarray      # (n_t, n)
    controls: np.ndarray    # (n_t, m)
    cost: float = 0.0


def _rk4_linear(M: np.ndarray, y: np.ndarray, h: float) -> np.ndarray:
    k1 = M @ y
    k2 = M @ (y + 0.5 * h * k1)
    k3 = M @ (y + 0.5 * h * k2)
    k4 = M @ (y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _feedback_cost(sys: ModalLTI, times: np.ndarray, states: np.ndarray, controls: np.ndarray,
                   terminal: bool) -> float:
    running = sys.weight * np.sum(states ** 2, axis=1) + np.sum(controls ** 2, axis=1)
    cost = 0.5 * trapezoid(running, times)
    if terminal:
        cost += 0.5 * float(states[-1] @ states[-1])
    return float(cost)


def closed_loop_simulate(sys: ModalLTI, E: np.ndarray, y0: np.ndarray, T: float,
                         n_steps: Optional[int] = None) -> FeedbackTrajectory:
    """RK4 for y' = (A - B B^T E) y, recording v = -B^T E y."""
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (sys.n,):
        raise ShapeError(f"Initial state must have shape ({sys.n},)")
    M = closed_loop_matrix(sys, E)
    if n_steps is None:
        n_steps = max(1, int(np.ceil(T * np.linalg.norm(M, np.inf))))
    h = T / n_steps
    times = np.linspace(0.0, T, n_steps + 1)
    states = np.empty((n_steps + 1, sys.n))
    states[0] = y0
    for j in range(n_steps):
        states[j + 1] = _rk4_linear(M, states[j], h)
    controls = -(states @ E @ sys.B)
    cost = _feedback_cost(sys, times, states, controls, terminal=False)
    return FeedbackTrajectory(times, states, controls, cost)


def riccati_feedback_trajectory(sys: ModalLTI, y0: np.ndarray, T: float, n_steps: int,
                                max_step: float = RICCATI_MAX_STEP) -> FeedbackTrajectory:
    """
    Optimal trajectory for y_d = 0 with terminal cost |y(T)|^2 via
    v = -B^T E(T - t) y, E recorded at every half step of the state march.
    """
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (sys.n,):
        raise ShapeError(f"Initial state must have shape ({sys.n},)")
    ric = solve_riccati_ode(sys, T, n_records=2 * n_steps, max_step=max_step)
    E_of_t = ric.values[::-1]
    h = T / n_steps
    times = np.linspace(0.0, T, n_steps + 1)
    states = np.empty((n_steps + 1, sys.n))
    states[0] = y0
    for j in range(n_steps):
        M0 = closed_loop_matrix(sys, E_of_t[2 * j])
        Mh = closed_loop_matrix(sys, E_of_t[2 * j + 1])
        M1 = closed_loop_matrix(sys, E_of_t[2 * j + 2])
        y = states[j]
        k1 = M0 @ y
        k2 = Mh @ (y + 0.5 * h * k1)
        k3 = Mh @ (y + 0.5 * h * k2)
        k4 = M1 @ (y + h * k3)
        states[j + 1] = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    controls = np.stack([-(sys.B.T @ E_of_t[2 * j] @ states[j]) for j in range(n_steps + 1)])
    cost = _feedback_cost(sys, times, states, controls, terminal=True)
    return FeedbackTrajectory(times, states, controls, cost)


def optimal_cost(sys: ModalLTI, y0: np.ndarray, T: float, **kwargs) -> float:
    """(1/2) <E(T) y0, y0>: optimal value for y_d = 0 with terminal |y(T)|^2."""
    y0 = np.asarray(y0, dtype=float)
    return 0.5 * float(y0 @ solve_riccati_ode(sys, T, **kwargs).final @ y0)


# ================================================================
# DYNAMIC LQ (DIRECT TRANSCRIPTION)
# ================================================================

@dataclass(eq=False)
class OptimalTriple:
    """State, control and adjoint at the time nodes.

    For the dynamic problem the controls and multipliers also exist on the
    step intervals (controls_mid, multipliers); P ~ -multipliers.
    """
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    adjoints: np.ndarray
    controls_mid: Optional[np.ndarray] = None
    multipliers: Optional[np.ndarray] = None
    cost: float = 0.0
    kkt_residual: float = 0.0
    terminal: str = "none"

    @classmethod
    def steady(cls, times: np.ndarray, y: np.ndarray, v: np.ndarray, p: np.ndarray,
               residual: float = 0.0) -> "OptimalTriple":
        n_t = times.size
        return cls(times, np.tile(y, (n_t, 1)), np.tile(v, (n_t, 1)), np.tile(p, (n_t, 1)),
                   kkt_residual=residual)


def _target_series(y_d, n_t: int, n: int) -> np.ndarray:
    if y_d is None:
        return np.zeros((n_t, n))
    y_d = np.asarray(y_d, dtype=float)
    if y_d.shape == (n,):
        return np.tile(y_d, (n_t, 1))
    if y_d.shape == (n_t, n):
        return y_d
    raise ShapeError(f"Target must have shape ({n},) or ({n_t}, {n}), got {y_d.shape}")


def _node_values(mid: np.ndarray) -> np.ndarray:
    """Interval values -> node values (averages, linear extrapolation at the ends)."""
    M = mid.shape[0]
    out = np.empty((M + 1,) + mid.shape[1:])
    if M == 1:
        out[0] = out[1] = mid[0]
        return out
    out[1:M] = 0.5 * (mid[:-1] + mid[1:])
    out[0] = 1.5 * mid[0] - 0.5 * mid[1]
    out[M] = 1.5 * mid[-1] - 0.5 * mid[-2]
    return out


def _state_weights(M: int, h: float) -> np.ndarray:
    w = np.full(M, h)
    w[-1] = 0.5 * h
    return w


def lq_cost(sys: ModalLTI, times: np.ndarray, states: np.ndarray, controls_mid: np.ndarray,
            y_d=None, terminal: str = "none") -> float:
    """Trapezoid state cost + interval control cost (+ (1/2)|Y_M|^2)."""
    h = times[1] - times[0]
    targets = _target_series(y_d, times.size, sys.n)
    dev = np.sum((states - targets) ** 2, axis=1)
    cost = 0.5 * sys.weight * trapezoid(dev, times) + 0.5 * h * float(np.sum(controls_mid ** 2))
    if terminal == "half_norm":
        cost += 0.5 * float(states[-1] @ states[-1])
    return float(cost)


def simulate_midpoint(sys: ModalLTI, y0: np.ndarray, controls_mid: np.ndarray, T: float) -> np.ndarray:
    """States of the implicit-midpoint transition driven by interval controls."""
    M = controls_mid.shape[0]
    h = T / M
    I = np.eye(sys.n)
    lu = la.lu_factor(I - 0.5 * h * sys.A)
    forward = I + 0.5 * h * sys.A
    states = np.empty((M + 1, sys.n))
    states[0] = y0
    for j in range(M):
        states[j + 1] = la.lu_solve(lu, forward @ states[j] + h * sys.B @ controls_mid[j])
    return states


def reduced_gradient(sys: ModalLTI, y0: np.ndarray, controls_mid: np.ndarray, T: float,
                     y_d=None, terminal: str = "none") -> np.ndarray:
    """Gradient of lq_cost with respect to the interval controls (adjoint sweep)."""
    M = controls_mid.shape[0]
    h = T / M
    times = np.linspace(0.0, T, M + 1)
    states = simulate_midpoint(sys, y0, controls_mid, T)
    targets = _target_series(y_d, M + 1, sys.n)
    I = np.eye(sys.n)
    lu = la.lu_factor((I - 0.5 * h * sys.A).T)
    forward_T = (I + 0.5 * h * sys.A).T
    w = _state_weights(M, h)
    lam = np.empty((M, sys.n))
    rhs = -w[-1] * sys.weight * (states[M] - targets[M])
    if terminal == "half_norm":
        rhs -= states[M]
    lam[M - 1] = la.lu_solve(lu, rhs)
    for j in range(M - 1, 0, -1):
        rhs = forward_T @ lam[j] - w[j - 1] * sys.weight * (states[j] - targets[j])
        lam[j - 1] = la.lu_solve(lu, rhs)
    return h * controls_mid - h * lam @ sys.B


def gradient_check(sys: ModalLTI, y0: np.ndarray, T: float, n_steps: int, rng: np.random.Generator,
                   y_d=None, terminal: str = "none", directions: int = 3, step: float = 1e-3) -> float:
    """
    Largest relative gap between reduced_gradient and central differences of
    lq_cost, at a random control and along random directions drawn from rng.
    """
    times = np.linspace(0.0, T, n_steps + 1)
    controls = rng.standard_normal((n_steps, sys.m))
    grad = reduced_gradient(sys, y0, controls, T, y_d, terminal)

    def cost(c: np.ndarray) -> float:
        return lq_cost(sys, times, simulate_midpoint(sys, y0, c, T), c, y_d, terminal)

    worst = 0.0
    for _ in range(directions):
        d = rng.standard_normal(controls.shape)
        central = (cost(controls + step * d) - cost(controls - step * d)) / (2.0 * step)
        exact = float(np.sum(grad * d))
        worst = max(worst, abs(central - exact) / max(abs(exact), 1e-300))
    logger.debug("Gradient check (mode %d): worst relative gap %.2e", sys.mode, worst)
    return worst


def solve_dynamic_lq(sys: ModalLTI, y0: np.ndarray, y_d, T: float, n_steps: int,
                     terminal: str = "none") -> OptimalTriple:
    """
    Minimise (N/2) int |Y - Y_d|^2 + (1/2) int |V|^2 (+ (1/2)|Y(T)|^2)
    subject to the implicit-midpoint transition

        (I - h A/2) Y_j = (I + h A/2) Y_{j-1} + h B V_{j-1/2}

    as one sparse symmetric indefinite KKT system in (Y_1..Y_M, V, Lambda).

    Args:
        sys: modal system
        y0: initial state (n,)
        y_d: None, a constant target (n,) or a series (M + 1, n)
        T: horizon
        n_steps: M, number of time steps
        terminal: "none" or "half_norm"

    Returns:
        OptimalTriple at the M + 1 nodes
    """
    if terminal not in TERMINAL_CHOICES:
        raise DomainError(f"terminal must be one of {TERMINAL_CHOICES}, got '{terminal}'")
    if T <= 0 or n_steps < 1:
        raise DomainError(f"Need T > 0 and at least one step, got T={T}, n_steps={n_steps}")
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (sys.n,):
        raise ShapeError(f"Initial state must have shape ({sys.n},)")
    n, m, M = sys.n, sys.m, n_steps
    h = T / M
    times = np.linspace(0.0, T, M + 1)
    targets = _target_series(y_d, M + 1, n)
    I = np.eye(n)
    back = sp.csr_matrix(I - 0.5 * h * sys.A)
    forward = sp.csr_matrix(I + 0.5 * h * sys.A)

    w = _state_weights(M, h)
    hy = np.repeat(sys.weight * w, n)
    if terminal == "half_norm":
        hy[-n:] += 1.0
    H_Y = sp.diags(hy)
    H_V = sp.identity(M * m) * h
    C_Y = sp.kron(sp.identity(M), back) - sp.kron(sp.eye(M, k=-1), forward)
    C_V = sp.kron(sp.identity(M), sp.csr_matrix(-h * sys.B))
    kkt = sp.bmat([[H_Y, None, C_Y.T], [None, H_V, C_V.T], [C_Y, C_V, None]], format="csc")

    g_Y = (sys.weight * w[:, None] * targets[1:]).ravel()
    c = np.zeros(M * n)
    c[:n] = forward @ y0
    rhs = np.concatenate([g_Y, np.zeros(M * m), c])
    if not np.any(rhs):
        z = np.zeros(rhs.size)
    else:
        z = spsolve(kkt, rhs)
        if not np.all(np.isfinite(z)):
            raise KKTError(f"KKT system could not be factorised; try a smaller time step than {h:.3e}")
    residual = float(np.linalg.norm(kkt @ z - rhs) / max(np.linalg.norm(rhs), 1e-300))

    Y = np.vstack([y0, z[:M * n].reshape(M, n)])
    V_mid = z[M * n:M * (n + m)].reshape(M, m)
    lam = z[M * (n + m):].reshape(M, n)
    P = _node_values(-lam)
    P[-1] = Y[-1] if terminal == "half_norm" else 0.0
    cost = lq_cost(sys, times, Y, V_mid, targets, terminal)
    logger.debug("Dynamic LQ (mode %d): %d steps, KKT residual %.2e, cost %.6e", sys.mode, M, residual, cost)
    return OptimalTriple(times, Y, _node_values(V_mid), P, V_mid, lam, cost, residual, terminal)


# ================================================================
# STATIC LQ
# ================================================================

def solve_static_lq(sys: ModalLTI, y_d=None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Steady optimality system

        A y + B v = 0,   N y + A^T p = N y_d,   v + B^T p = 0

    solved as one dense linear system. A singular A_d (reproduction number
    one for the mode) raises StaticSingularityError.
    """
    n, m = sys.n, sys.m
    y_d = np.zeros(n) if y_d is None else np.asarray(y_d, dtype=float)
    if y_d.shape != (n,):
        raise ShapeError(f"Static target must have shape ({n},)")
    cond = np.linalg.cond(sys.A)
    if not np.isfinite(cond) or cond > SINGULAR_CONDITION:
        raise StaticSingularityError(f"Drift matrix is singular (condition {cond:.3e}); "
                                     "steady states form a family")
    I = np.eye(n)
    K = np.block([
        [sys.A, sys.B, np.zeros((n, n))],
        [sys.weight * I, np.zeros((n, m)), sys.A.T],
        [np.zeros((m, n)), np.eye(m), sys.B.T],
    ])
    rhs = np.concatenate([np.zeros(n), sys.weight * y_d, np.zeros(m)])
    z = np.linalg.solve(K, rhs)
    residual = np.linalg.norm(K @ z - rhs) / max(np.linalg.norm(rhs), 1e-300)
    logger.debug("Static LQ (mode %d): relative residual %.2e", sys.mode, residual)
    return z[:n], z[n:n + m], z[n + m:]


def static_cost(sys: ModalLTI, y: np.ndarray, v: np.ndarray, y_d=None) -> float:
    y_d = np.zeros(sys.n) if y_d is None else np.asarray(y_d, dtype=float)
    return 0.5 * sys.weight * float((y - y_d) @ (y - y_d)) + 0.5 * float(v @ v)
