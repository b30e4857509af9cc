#!/usr/bin/env python3
"""
Neumann Spectral Basis
======================

Eigenpairs of -d^2/dx^2 on (0, L) with homogeneous Neumann conditions:

    phi_k(x) = A_k cos(k pi x / L),   lambda_k = k^2 pi^2 / L^2

normalised in L^2(0, L) (A_0 = sqrt(1/L), A_k = sqrt(2/L)). Profiles are
sampled on a uniform grid of n_x points and inner products use the
trapezoid rule, under which the sampled cosines are exactly orthonormal.
"""

import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from errors import DomainError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_MODES = 8
DEFAULT_GRID_POINTS = 512


def eigenvalue(k: int, L: float) -> float:
    """lambda_k = k^2 pi^2 / L^2."""
    if k < 0:
        raise DomainError(f"Mode index must be nonnegative, got {k}")
    if L <= 0:
        raise DomainError(f"Domain length must be positive, got {L}")
    return (k * np.pi / L) ** 2


def _trapezoid_weights(x: np.ndarray) -> np.ndarray:
    w = np.full(x.size, x[1] - x[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


@dataclass(frozen=True, eq=False)
class NeumannBasis:
    """First K Neumann eigenfunctions sampled on a uniform grid of (0, L)."""
    L: float = 1.0
    K: int = DEFAULT_MODES
    n_x: int = DEFAULT_GRID_POINTS
    x: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)
    eigenvalues: np.ndarray = field(init=False, repr=False)
    norms: np.ndarray = field(init=False, repr=False)
    functions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.L <= 0:
            raise DomainError(f"Domain length must be positive, got {self.L}")
        if self.K < 1:
            raise DomainError(f"Need at least one mode, got K={self.K}")
        if self.n_x < 2 or self.K > self.n_x - 1:
            raise DomainError(f"Grid of {self.n_x} points cannot resolve {self.K} modes")
        x = np.linspace(0.0, self.L, self.n_x)
        k = np.arange(self.K)
        norms = np.where(k == 0, np.sqrt(1.0 / self.L), np.sqrt(2.0 / self.L))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "weights", _trapezoid_weights(x))
        object.__setattr__(self, "eigenvalues", (k * np.pi / self.L) ** 2)
        object.__setattr__(self, "norms", norms)
        object.__setattr__(self, "functions", norms[:, None] * np.cos(np.outer(k, x) * np.pi / self.L))

    def basis_function(self, k: int) -> np.ndarray:
        if not 0 <= k < self.K:
            raise DomainError(f"Mode {k} outside 0..{self.K - 1}")
        return self.functions[k].copy()

    def gram_matrix(self) -> np.ndarray:
        """<phi_j, phi_k> under the grid quadrature."""
        return (self.functions * self.weights) @ self.functions.T


def project(f: np.ndarray, basis: NeumannBasis) -> np.ndarray:
    """
    Mode coefficients c_k = <f, phi_k>.

    Args:
        f: profile sampled on basis.x; extra leading axes are allowed, the
           last axis must be the spatial one

    Returns:
        coefficients with the spatial axis replaced by a K axis
    """
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != basis.n_x:
        raise ShapeError(f"Profile has {f.shape[-1]} samples, basis grid has {basis.n_x}")
    return (f * basis.weights) @ basis.functions.T


def reconstruct(c: np.ndarray, basis: NeumannBasis) -> np.ndarray:
    """Sum_k c_k phi_k(x) on the basis grid (last axis of c is the mode axis)."""
    c = np.asarray(c, dtype=float)
    if c.shape[-1] != basis.K:
        raise ShapeError(f"Got {c.shape[-1]} coefficients for a {basis.K}-mode basis")
    return c @ basis.functions


def heat_propagate(c: np.ndarray, t: float, basis: NeumannBasis) -> np.ndarray:
    """
    Apply e^{t Delta}: c_k -> exp(-lambda_k t) c_k.

    Only basis.eigenvalues and basis.K are read, so a transport ModalModel
    can stand in for the basis.
    """
    if t < 0:
        raise DomainError(f"Heat propagation needs t >= 0, got {t}")
    c = np.asarray(c, dtype=float)
    if c.shape[-1] != basis.K:
        raise ShapeError(f"Got {c.shape[-1]} coefficients for a {basis.K}-mode basis")
    return c * np.exp(-basis.eigenvalues * t)


def indicator_operator(basis: NeumannBasis, omega: Tuple[float, float]) -> np.ndarray:
    """
    Matrix M_jk = <1_omega phi_j, phi_k> restricting a modal field to omega.

    For omega = (0, L) this is the identity (to quadrature accuracy); for a
    proper sub-interval the restriction couples the modes.
    """
    lo, hi = omega
    if not 0.0 <= lo < hi <= basis.L:
        raise DomainError(f"omega=({lo}, {hi}) must satisfy 0 <= lo < hi <= L={basis.L}")
    mask = ((basis.x >= lo) & (basis.x <= hi)).astype(float)
    return (basis.functions * (basis.weights * mask)) @ basis.functions.T


def is_full_domain(basis: NeumannBasis, omega: Tuple[float, float]) -> bool:
    return omega[0] <= 0.0 and omega[1] >= basis.L
