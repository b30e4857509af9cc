#!/usr/bin/env python3
"""
Demographic Primitives
======================

Mortality, fertility, survival probability, reproduction number and the
Lotka root. Every other module builds on these.

SURVIVAL:
    pi(a) = exp(-int_0^a mu(s) ds)

    The closed-form mortality mu(a) = 1 / (c (A - a)) gives
    pi(a) = ((A - a) / A) ** (1 / c), so pi(A) = 0 and int_0^A mu diverges.
    Ratios pi(a) / pi(a - t) are always formed in log-space; pi is never
    inverted.

QUADRATURE:
    All int_0^A integrals use the composite trapezoid rule on a uniform age
    grid, the same rule the transport march uses for the renewal integral.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid

from errors import ConvergenceError, DomainError, NoRootError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

DEFAULT_LIFESPAN = 1.0
DEFAULT_HAZARD_C = 50.0
FERTILITY_SCALE = 60.0 ** 5
DEFAULT_REPRODUCTION_TARGET = 0.8
QUADRATURE_CELLS = 2000

MORTALITY_KINDS = ("closed_form", "constant", "tabulated")
FERTILITY_KINDS = ("closed_form", "constant", "tabulated")

# Slack allowed when checking 0 <= a <= A on float ages.
_AGE_TOL = 1e-12


# ================================================================
# RATE TYPES
# ================================================================

@dataclass(frozen=True, eq=False)
class MortalityRate:
    """Age-specific mortality mu(a) on [0, A).

    kind:
        closed_form  mu(a) = 1 / (c (A - a))
        constant           mu(a) = rate
        tabulated          piecewise-linear through (ages, values)
    """
    kind: str = "closed_form"
    A: float = DEFAULT_LIFESPAN
    c: float = DEFAULT_HAZARD_C
    rate: float = 0.0
    ages: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in MORTALITY_KINDS:
            raise DomainError(f"Unknown mortality kind '{self.kind}'")
        if self.A <= 0:
            raise DomainError(f"Lifespan A must be positive, got {self.A}")
        if self.kind == "closed_form" and self.c <= 0:
            raise DomainError(f"Mortality constant c must be positive, got {self.c}")
        if self.kind == "constant" and self.rate < 0:
            raise DomainError(f"Mortality rate must be nonnegative, got {self.rate}")
        if self.kind == "tabulated":
            _check_table(self.ages, self.values, "mortality")

    def __call__(self, a: ArrayLike) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if self.kind == "closed_form":
            with np.errstate(divide="ignore"):
                return 1.0 / (self.c * (self.A - a))
        if self.kind == "constant":
            return np.full_like(a, self.rate)
        return np.interp(a, self.ages, self.values)


@dataclass(frozen=True, eq=False)
class FertilityRate:
    """Age-specific fertility beta(a), shared by every spatial mode.

    support_floor is a_b: beta vanishes on (0, a_b), which is the hypothesis
    the distributed null control needs.
    """
    kind: str = "closed_form"
    A: float = DEFAULT_LIFESPAN
    scale: float = FERTILITY_SCALE
    rate: float = 0.0
    support_floor: float = 0.0
    ages: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in FERTILITY_KINDS:
            raise DomainError(f"Unknown fertility kind '{self.kind}'")
        if self.A <= 0:
            raise DomainError(f"Lifespan A must be positive, got {self.A}")
        if not 0.0 <= self.support_floor <= self.A:
            raise DomainError(f"support_floor must lie in [0, A], got {self.support_floor}")
        if self.kind == "closed_form" and self.scale < 0:
            raise DomainError(f"Fertility scale must be nonnegative, got {self.scale}")
        if self.kind == "constant" and self.rate < 0:
            raise DomainError(f"Fertility rate must be nonnegative, got {self.rate}")
        if self.kind == "tabulated":
            _check_table(self.ages, self.values, "fertility")

    def __call__(self, a: ArrayLike) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        A = self.A
        if self.kind == "closed_form":
            out = self.scale * a ** 2 * (A - a) ** 2 * np.exp(-3.0 * (a - A / 2.0) ** 2)
        elif self.kind == "constant":
            out = np.full_like(a, self.rate)
        else:
            out = np.interp(a, self.ages, self.values, left=0.0, right=0.0)
        out = np.where((a < self.support_floor) | (a < 0.0) | (a > A), 0.0, out)
        return out

    def scaled(self, factor: float) -> "FertilityRate":
        """Return beta multiplied by a nonnegative factor."""
        if factor < 0:
            raise DomainError(f"Fertility scaling factor must be nonnegative, got {factor}")
        if self.kind == "closed_form":
            return replace(self, scale=self.scale * factor)
        if self.kind == "constant":
            return replace(self, rate=self.rate * factor)
        return replace(self, values=np.asarray(self.values, dtype=float) * factor)

    def sup_norm(self, n_cells: int = QUADRATURE_CELLS) -> float:
        """||beta||_inf sampled on a uniform grid."""
        return float(np.max(self(np.linspace(0.0, self.A, n_cells + 1))))


def _check_table(ages: Optional[np.ndarray], values: Optional[np.ndarray], label: str) -> None:
    if ages is None or values is None:
        raise DomainError(f"Tabulated {label} needs both ages and values")
    ages = np.asarray(ages, dtype=float)
    values = np.asarray(values, dtype=float)
    if ages.ndim != 1 or ages.shape != values.shape or ages.size < 2:
        raise DomainError(f"Tabulated {label} needs two equal-length columns with >= 2 rows")
    if abs(ages[0]) > _AGE_TOL:
        raise DomainError(f"Tabulated {label} must start at age 0, got {ages[0]}")
    if np.any(np.diff(ages) <= 0):
        raise DomainError(f"Tabulated {label} ages must be strictly increasing")
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise DomainError(f"Tabulated {label} values must be finite and nonnegative")


def load_rate_table(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read a two-column CSV (age, value).

    Lines starting with '#' are comments; a non-numeric header row is skipped.

    Returns:
        (ages, values) as float arrays
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Rate table not found: {path}")
    data = np.genfromtxt(path, delimiter=",", comments="#", dtype=float)
    data = np.atleast_2d(data)
    if data.shape[1] != 2:
        raise DomainError(f"{path}: expected two columns (age, value), got {data.shape[1]}")
    data = data[~np.isnan(data).any(axis=1)]
    logger.debug("Loaded %d rows from %s", data.shape[0], path)
    return data[:, 0].copy(), data[:, 1].copy()


# ================================================================
# SURVIVAL
# ================================================================

def mortality_integral(mu: MortalityRate, a: ArrayLike) -> np.ndarray:
    """Cumulative hazard int_0^a mu(s) ds (inf at a = A for the closed form)."""
    a = np.asarray(a, dtype=float)
    if mu.kind == "closed_form":
        gap = np.clip(mu.A - a, 0.0, None)
        with np.errstate(divide="ignore"):
            return -np.log(gap / mu.A) / mu.c
    if mu.kind == "constant":
        return mu.rate * a
    ages = np.asarray(mu.ages, dtype=float)
    values = np.asarray(mu.values, dtype=float)
    node_cum = np.concatenate(([0.0], np.cumsum(0.5 * np.diff(ages) * (values[1:] + values[:-1]))))
    idx = np.clip(np.searchsorted(ages, a, side="right") - 1, 0, ages.size - 1)
    return node_cum[idx] + 0.5 * (a - ages[idx]) * (values[idx] + np.interp(a, ages, values))


def _check_ages(mu: MortalityRate, a: np.ndarray) -> None:
    tol = _AGE_TOL * max(1.0, mu.A)
    if np.any(a < -tol) or np.any(a > mu.A + tol):
        raise DomainError(f"Age outside [0, {mu.A}]: {a.min() if a.size else a}..{a.max() if a.size else a}")


def survival(mu: MortalityRate, a: ArrayLike) -> ArrayLike:
    """
    Survival probability pi(a) = exp(-int_0^a mu).

    Args:
        mu: mortality rate
        a: age or array of ages in [0, A]

    Returns:
        pi(a), same shape as a (float for scalar input)
    """
    arr = np.asarray(a, dtype=float)
    _check_ages(mu, arr)
    arr = np.clip(arr, 0.0, mu.A)
    if mu.kind == "closed_form":
        out = ((mu.A - arr) / mu.A) ** (1.0 / mu.c)
    else:
        out = np.exp(-mortality_integral(mu, arr))
    return float(out) if np.ndim(a) == 0 else out


def survival_ratio(mu: MortalityRate, a: ArrayLike, t: ArrayLike) -> ArrayLike:
    """
    pi(a) / pi(a - t) = exp(-int_{a-t}^a mu), evaluated in log-space.

    Requires 0 <= t <= a <= A. The result lies in [0, 1] and equals 1 at t = 0
    even at a = A.
    """
    a_arr = np.asarray(a, dtype=float)
    t_arr = np.asarray(t, dtype=float)
    a_arr, t_arr = np.broadcast_arrays(a_arr, t_arr)
    tol = _AGE_TOL * max(1.0, mu.A)
    if np.any(t_arr < -tol) or np.any(t_arr > a_arr + tol):
        raise DomainError("survival_ratio needs 0 <= t <= a")
    _check_ages(mu, a_arr)
    a_arr = np.clip(a_arr, 0.0, mu.A)
    t_arr = np.clip(t_arr, 0.0, a_arr)

    with np.errstate(divide="ignore", invalid="ignore"):
        if mu.kind == "closed_form":
            log_ratio = (np.log(mu.A - a_arr) - np.log(mu.A - a_arr + t_arr)) / mu.c
        else:
            log_ratio = -(mortality_integral(mu, a_arr) - mortality_integral(mu, a_arr - t_arr))
        out = np.where(t_arr == 0.0, 1.0, np.exp(log_ratio))
    out = np.clip(np.nan_to_num(out, nan=0.0), 0.0, 1.0)
    return float(out) if np.ndim(a) == 0 and np.ndim(t) == 0 else out


# ================================================================
# REPRODUCTION
# ================================================================

def _quadrature_ages(A: float, n_cells: int) -> np.ndarray:
    if n_cells < 1:
        raise DomainError(f"Quadrature needs at least one cell, got {n_cells}")
    return np.linspace(0.0, A, n_cells + 1)


def _check_same_lifespan(beta: FertilityRate, mu: MortalityRate) -> None:
    if abs(beta.A - mu.A) > _AGE_TOL * max(1.0, mu.A):
        raise DomainError(f"Fertility (A={beta.A}) and mortality (A={mu.A}) disagree on A")


def characteristic_function(beta: FertilityRate, mu: MortalityRate, lam: ArrayLike,
                            n_cells: int = QUADRATURE_CELLS) -> ArrayLike:
    """Lotka transform beta~(lam) = int_0^A beta(a) e^{-lam a} pi(a) da."""
    _check_same_lifespan(beta, mu)
    ages = _quadrature_ages(mu.A, n_cells)
    weight = beta(ages) * survival(mu, ages)
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=float))
    with np.errstate(over="ignore", invalid="ignore"):
        integrand = weight[None, :] * np.exp(-np.outer(lam_arr, ages))
        integrand = np.nan_to_num(integrand, nan=0.0)
        out = trapezoid(integrand, ages, axis=1)
    return float(out[0]) if np.ndim(lam) == 0 else out


def reproduction_number(beta: FertilityRate, mu: MortalityRate,
                        n_cells: int = QUADRATURE_CELLS) -> float:
    """R = int_0^A beta(a) pi(a) da by the composite trapezoid rule."""
    return float(characteristic_function(beta, mu, 0.0, n_cells))


def discrete_reproduction_number(beta: FertilityRate, mu: MortalityRate, ages: np.ndarray) -> float:
    """R evaluated with the trapezoid rule on an explicit age grid."""
    ages = np.asarray(ages, dtype=float)
    return float(trapezoid(beta(ages) * survival(mu, ages), ages))


def normalize_fertility(beta: FertilityRate, mu: MortalityRate, target_R: float,
                        n_cells: int = QUADRATURE_CELLS) -> FertilityRate:
    """Rescale beta so that R(beta, mu) equals target_R."""
    if target_R < 0:
        raise DomainError(f"Target reproduction number must be nonnegative, got {target_R}")
    current = reproduction_number(beta, mu, n_cells)
    if current <= 0:
        raise NoRootError("Cannot normalise a fertility rate with R = 0")
    logger.debug("Rescaling fertility: R %.6e -> %.6e", current, target_R)
    return beta.scaled(target_R / current)


def lotka_root(beta: FertilityRate, mu: MortalityRate, n_cells: int = QUADRATURE_CELLS,
               bracket: float = 1.0, max_expansions: int = 40, tol: float = 1e-13,
               max_iterations: int = 200) -> float:
    """
    Real root lam* of beta~(lam) = 1 by bisection.

    beta~ is strictly decreasing, so sign(lam*) = sign(R - 1). The bracket
    [-bracket, bracket] is doubled until it changes sign.

    Raises:
        NoRootError: R = 0
        ConvergenceError: no sign change within max_expansions doublings
    """
    def excess(lam: float) -> float:
        return characteristic_function(beta, mu, lam, n_cells) - 1.0

    R = reproduction_number(beta, mu, n_cells)
    if R <= 0:
        raise NoRootError("Lotka equation has no real root when R = 0")
    if R == 1.0:
        return 0.0

    lo, hi = -bracket, bracket
    for _ in range(max_expansions):
        if excess(lo) > 0 > excess(hi):
            break
        lo, hi = 2.0 * lo, 2.0 * hi
    else:
        raise ConvergenceError(f"Lotka bracket not found within [{lo}, {hi}]")

    for _ in range(max_iterations):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * (1.0 + abs(mid)):
            break
    root = 0.5 * (lo + hi)
    logger.debug("Lotka root %.12f (R = %.6f)", root, R)
    return root
