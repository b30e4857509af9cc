#!/usr/bin/env python3
"""
Turnpike Diagnostics
====================

Post-processing of optimal triples: how far the dynamic optimum strays from
the static one, the exponential boundary layers at both ends, the integral
turnpike measure, and the dissipativity inequality along trajectories driven
by the static control.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as la
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.stats import linregress

from errors import DomainError, ShapeError
from lqr import ModalLTI, OptimalTriple

logger = logging.getLogger(__name__)

FIT_MIN_R2 = 0.9
FIT_FLOOR = 1e-14
PLATEAU_RATIO = 1e-3
ENVELOPE_FRACTION = 0.95

StaticTriple = Tuple[np.ndarray, np.ndarray, np.ndarray]


# ================================================================
# RESULT RECORDS
# ================================================================

@dataclass
class DeviationSeries:
    times: np.ndarray
    state: np.ndarray
    control: np.ndarray
    adjoint: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.state + self.control


@dataclass
class RateFit:
    C: float = float("nan")
    nu: float = float("nan")
    r_squared: float = float("nan")
    points: int = 0
    accepted: bool = False
    note: str = ""


@dataclass
class EnvelopeCheck:
    C: float
    nu: float
    fraction: float
    holds: bool


@dataclass
class TurnpikeReport:
    times: np.ndarray
    deviation: np.ndarray
    left: RateFit
    right: RateFit
    plateau: float
    peak: float
    integral_measure: float
    verdict: str
    envelope: Optional[EnvelopeCheck] = None
    notes: List[str] = field(default_factory=list)

    @property
    def observed(self) -> bool:
        return self.verdict == "turnpike observed"

    def to_lines(self) -> List[str]:
        lines = [
            f"verdict = {self.verdict}",
            f"plateau = {self.plateau:.6e}",
            f"peak = {self.peak:.6e}",
            f"integral_measure = {self.integral_measure:.6e}",
        ]
        for side, fit in (("left", self.left), ("right", self.right)):
            lines.append(f"{side}_nu = {fit.nu:.6e}")
            lines.append(f"{side}_C = {fit.C:.6e}")
            lines.append(f"{side}_r2 = {fit.r_squared:.6f}")
            lines.append(f"{side}_accepted = {str(fit.accepted).lower()}")
        if self.envelope is not None:
            lines.append(f"envelope_fraction = {self.envelope.fraction:.4f}")
        lines.extend(f"note = {n}" for n in self.notes)
        return lines


@dataclass
class DissipativityCheck:
    """
    Storage S(y) = scale * <y, p_bar>, scale = -2/N, against the supply rate;
    the literal storage <y, p_bar> is evaluated alongside with its own slack.
    """
    times: np.ndarray
    storage: np.ndarray
    supply: np.ndarray
    penalty: np.ndarray
    slack: np.ndarray
    storage_literal: np.ndarray
    slack_literal: np.ndarray
    storage_scale: float

    @property
    def min_slack(self) -> float:
        return float(np.min(self.slack))

    @property
    def min_slack_literal(self) -> float:
        return float(np.min(self.slack_literal))

    @property
    def strictly_dissipative(self) -> bool:
        """slack >= (1/2) int |y - y_bar|^2 at every node."""
        return bool(np.all(self.slack >= self.penalty - 1e-9 * max(1.0, float(np.max(np.abs(self.supply))))))


# ================================================================
# DEVIATIONS AND FITS
# ================================================================

def _static_arrays(static: Union[StaticTriple, OptimalTriple]) -> StaticTriple:
    if isinstance(static, OptimalTriple):
        return static.states[0], static.controls[0], static.adjoints[0]
    y, v, p = static
    return np.asarray(y, dtype=float), np.atleast_1d(np.asarray(v, dtype=float)), np.asarray(p, dtype=float)


def deviation_curves(triple: OptimalTriple, static: Union[StaticTriple, OptimalTriple]) -> DeviationSeries:
    """Pointwise ||Y - y_bar||, ||V - v_bar||, ||P - p_bar|| at the time nodes."""
    y_bar, v_bar, p_bar = _static_arrays(static)
    if triple.states.shape[1] != y_bar.size or triple.controls.shape[1] != v_bar.size:
        raise ShapeError("Dynamic and static triples live on different grids")
    if isinstance(static, OptimalTriple) and not np.array_equal(static.times, triple.times):
        raise ShapeError("Dynamic and static triples use different time grids")
    return DeviationSeries(
        times=triple.times.copy(),
        state=np.linalg.norm(triple.states - y_bar, axis=1),
        control=np.linalg.norm(triple.controls - v_bar, axis=1),
        adjoint=np.linalg.norm(triple.adjoints - p_bar, axis=1),
    )


def combine_deviations(series: Sequence[DeviationSeries]) -> DeviationSeries:
    """Root-sum-square over modes (Parseval)."""
    if not series:
        raise ShapeError("Need at least one deviation series")
    times = series[0].times
    if any(not np.array_equal(s.times, times) for s in series):
        raise ShapeError("Deviation series use different time grids")
    rss = lambda name: np.sqrt(sum(getattr(s, name) ** 2 for s in series))
    return DeviationSeries(times.copy(), rss("state"), rss("control"), rss("adjoint"))


def _fit_window(x: np.ndarray, d: np.ndarray, label: str) -> RateFit:
    keep = d > FIT_FLOOR
    if np.count_nonzero(keep) < 3:
        fit = RateFit(points=int(np.count_nonzero(keep)), note=f"{label} window degenerate (d ~ 0)")
        logger.warning(fit.note)
        return fit
    res = linregress(x[keep], np.log(d[keep]))
    r2 = float(res.rvalue ** 2)
    fit = RateFit(C=float(np.exp(res.intercept)), nu=float(-res.slope), r_squared=r2,
                  points=int(np.count_nonzero(keep)))
    fit.accepted = r2 >= FIT_MIN_R2 and fit.nu > 0
    if not fit.accepted:
        fit.note = f"{label} fit rejected (R^2={r2:.3f}, nu={fit.nu:.3g})"
        logger.info(fit.note)
    return fit


def fit_exponential_rates(times: np.ndarray, d: np.ndarray, T: Optional[float] = None) -> Tuple[RateFit, RateFit, float]:
    """
    Log-linear fits d ~ C_l e^{-nu_l t} on [0, T/3] and d ~ C_r e^{-nu_r (T - t)}
    on [2T/3, T]; plateau = max d on [T/3, 2T/3].
    """
    times = np.asarray(times, dtype=float)
    d = np.asarray(d, dtype=float)
    if times.shape != d.shape:
        raise ShapeError("times and deviation must have equal length")
    T = float(times[-1]) if T is None else T
    if T <= 0:
        raise DomainError(f"Horizon must be positive, got {T}")
    left = times <= T / 3.0 + 1e-12
    right = times >= 2.0 * T / 3.0 - 1e-12
    middle = ~left & ~right
    fit_left = _fit_window(times[left], d[left], "left")
    fit_right = _fit_window(T - times[right], d[right], "right")
    plateau = float(np.max(d[middle])) if np.any(middle) else float("nan")
    return fit_left, fit_right, plateau


def integral_turnpike_measure(times: np.ndarray, d: np.ndarray) -> float:
    """Trapezoid integral of d over the horizon."""
    return float(trapezoid(np.asarray(d, dtype=float), np.asarray(times, dtype=float)))


def envelope_check(times: np.ndarray, d: np.ndarray, left: RateFit, right: RateFit,
                   initial_gap: float, terminal_gap: float) -> Optional[EnvelopeCheck]:
    """
    d(t) <= C (initial_gap e^{-nu t} + terminal_gap e^{-nu (T - t)}) with
    nu = min(nu_l, nu_r) and C calibrated on the two fit windows.
    """
    if not (left.accepted and right.accepted):
        return None
    T = float(times[-1])
    nu = min(left.nu, right.nu)
    bracket = initial_gap * np.exp(-nu * times) + terminal_gap * np.exp(-nu * (T - times))
    if not np.all(bracket > 0):
        return None
    windows = (times <= T / 3.0 + 1e-12) | (times >= 2.0 * T / 3.0 - 1e-12)
    C = float(np.max(d[windows] / bracket[windows]))
    fraction = float(np.mean(d <= C * bracket * (1.0 + 1e-9)))
    return EnvelopeCheck(C, nu, fraction, fraction >= ENVELOPE_FRACTION)


def turnpike_report(series: DeviationSeries, initial_gap: Optional[float] = None,
                    terminal_gap: Optional[float] = None) -> TurnpikeReport:
    """Fits, plateau statistic, integral measure and the verdict for one run."""
    times, d = series.times, series.total
    T = float(times[-1])
    left, right, plateau = fit_exponential_rates(times, d, T)
    edges = (times <= T / 3.0 + 1e-12) | (times >= 2.0 * T / 3.0 - 1e-12)
    peak = float(np.max(d[edges])) if np.any(edges) else 0.0
    notes = [f.note for f in (left, right) if f.note]
    if not np.isfinite(plateau):
        verdict = "turnpike not observed"
        notes.append("horizon too short for a plateau window")
    elif plateau > PLATEAU_RATIO * peak:
        verdict = "turnpike not observed"
        notes.append(f"plateau {plateau:.3e} above {PLATEAU_RATIO:g} x peak {peak:.3e}")
    elif not (left.accepted and right.accepted):
        verdict = "turnpike not observed"
        notes.append("boundary-layer rate fit rejected")
    else:
        verdict = "turnpike observed"
    envelope = None
    if initial_gap is not None and terminal_gap is not None:
        envelope = envelope_check(times, d, left, right, initial_gap, terminal_gap)
    report = TurnpikeReport(times.copy(), d.copy(), left, right, plateau, peak,
                            integral_turnpike_measure(times, d), verdict, envelope, notes)
    logger.info("Turnpike: %s (plateau %.3e, peak %.3e)", verdict, plateau, peak)
    return report


@dataclass
class HorizonSweep:
    horizons: np.ndarray
    measures: np.ndarray

    @property
    def ratio(self) -> float:
        lo = float(np.min(self.measures))
        return float(np.max(self.measures)) / lo if lo > 0 else float("inf")

    @property
    def bound(self) -> float:
        return float(np.max(self.measures))


def horizon_sweep(measure_for: Callable[[float], float], horizons: Sequence[float]) -> HorizonSweep:
    """Integral measure over a list of horizons; ratio = max / min."""
    values = np.array([measure_for(T) for T in horizons], dtype=float)
    return HorizonSweep(np.asarray(horizons, dtype=float), values)


# ================================================================
# DISSIPATIVITY
# ================================================================

def dissipativity_check(sys: ModalLTI, y0: np.ndarray, static: Union[StaticTriple, OptimalTriple],
                        T: float, n_steps: int = 200, y_d=None) -> DissipativityCheck:
    """
    Drive y0 with v = v_bar and compare storage growth with the supply

        S(y(tau)) - S(y0) <= int_0^tau w - (1/2) int_0^tau |y - y_bar|^2
        w = |y - y_d|^2 + |y(T)|^2 - |y_bar - y_d|^2

    The trajectory uses the exact propagator y_{n+1} = y_bar + e^{hA}(y_n - y_bar);
    the first moment int (y - y_bar) is taken from A^{-1}(e(tau) - e(0)). The
    literal storage <y, p_bar> has the same slack when y_bar = y_d and no
    sign guarantee otherwise.
    """
    y_bar, v_bar, p_bar = _static_arrays(static)
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (sys.n,):
        raise ShapeError(f"Initial state must have shape ({sys.n},)")
    if T <= 0 or n_steps < 1:
        raise DomainError("Need T > 0 and at least one step")
    y_d = np.zeros(sys.n) if y_d is None else np.asarray(y_d, dtype=float)

    h = T / n_steps
    times = np.linspace(0.0, T, n_steps + 1)
    step = la.expm(h * sys.A)
    e = np.empty((n_steps + 1, sys.n))
    e[0] = y0 - y_bar
    for j in range(n_steps):
        e[j + 1] = step @ e[j]
    y = y_bar + e

    offset = y_bar - y_d
    sq = np.sum(e ** 2, axis=1)
    first_moment = la.lu_solve(la.lu_factor(sys.A), (e - e[0]).T).T
    deviation_integral = cumulative_trapezoid(sq, times, initial=0.0)
    supply = deviation_integral + 2.0 * first_moment @ offset + times * float(y[-1] @ y[-1])
    penalty = 0.5 * deviation_integral

    scale = -2.0 / sys.weight
    literal = y @ p_bar
    storage = scale * literal
    return DissipativityCheck(times, storage, supply, penalty, supply - penalty - (storage - storage[0]),
                              literal, supply - penalty - (literal - literal[0]), scale)
