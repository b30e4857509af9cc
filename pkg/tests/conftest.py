"""Shared fixtures: baseline rates, age grids, small modal systems, scenario files."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add scripts directory to path
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from demographics import FertilityRate, MortalityRate, normalize_fertility
from lqr import assemble_modal_system
from spectral import NeumannBasis
from transport import AgeGrid, ModalModel


@pytest.fixture(scope="session")
def baseline_rates():
    """Closed-form mortality and fertility rescaled to R = 0.8."""
    mu = MortalityRate()
    beta = normalize_fertility(FertilityRate(), mu, 0.8)
    return mu, beta


@pytest.fixture(scope="session")
def basis():
    return NeumannBasis(L=1.0, K=4, n_x=256)


def make_model(rates, n_cells, eigenvalues=(0.0,)):
    mu, beta = rates
    return ModalModel(AgeGrid(1.0, n_cells), mu, beta, np.asarray(eigenvalues, dtype=float))


def bump(ages, center=0.5, width=0.15):
    return np.exp(-((ages - center) / width) ** 2)


@pytest.fixture(scope="session")
def baseline_model(baseline_rates, basis):
    """Four modes, 200 age cells."""
    return make_model(baseline_rates, 200, basis.eigenvalues)


@pytest.fixture(scope="session")
def baseline_field(baseline_model):
    """Bump in age times (1, 0.5, 0.25, 0.125) over the modes."""
    ages = baseline_model.grid.ages
    scale = 0.5 ** np.arange(baseline_model.K)
    return scale[:, None] * bump(ages)[None, :]


@pytest.fixture(scope="session")
def small_system(baseline_rates):
    """Mode-0 system on 20 age cells (n = 21)."""
    mu, beta = baseline_rates
    return assemble_modal_system(AgeGrid(1.0, 20), mu, beta, eigenvalue=0.0)


@pytest.fixture
def scenario_file(tmp_path):
    """Write scenario text to a temporary .cfg and return its path."""
    def write(text, name="scenario.cfg"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return write
