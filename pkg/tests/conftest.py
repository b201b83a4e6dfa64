"""
Pytest configuration and fixtures for stabopt tests

This module provides shared spectra, pseudo-extrema and tableaux. Expensive
fixtures are session-scoped and built once per test run.
"""

import sys
from pathlib import Path

# Add src directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

import numpy as np
import pytest

from stabopt.models import make_config
from stabopt.optimizer import OptimizeResult, find_max_dt
from stabopt.polynomial import (
    PseudoExtremaSet,
    StabilityPolynomial,
    disk_polynomial_pe,
    exponential_taylor_pe,
)
from stabopt.rk import ShuOsherTableau, build_tableau
from stabopt.spectra import Spectrum, generate_fv_advection_circle

# =============================================================================
# Test Configuration
# =============================================================================

# Upwind circle used for the disk optimality checks
CIRCLE_CELLS = 500
CIRCLE_LENGTH = 2.0

# Pseudo-extrema with one pair close to the imaginary axis (scaled coordinates)
SMALL_RE_REAL = -40.0
SMALL_RE_PAIRS = (-0.1 + 2.0j, -20.0 + 5.0j, -5.0 + 8.0j)


# =============================================================================
# Session-scoped Fixtures (created once per test run)
# =============================================================================


@pytest.fixture(scope="session")
def circle_spectrum() -> Spectrum:
    """
    Exact spectrum of 500-cell upwind advection on a domain of length 2.
    Eigenvalues lie on the circle of radius 1/Δx centred at -1/Δx.
    """
    print("\n" + "=" * 70)
    print(f"BUILDING UPWIND CIRCLE SPECTRUM ({CIRCLE_CELLS} cells)")
    print("=" * 70)
    return generate_fv_advection_circle(CIRCLE_CELLS, CIRCLE_LENGTH, 1.0)


@pytest.fixture(scope="session")
def circle_dx() -> float:
    return CIRCLE_LENGTH / CIRCLE_CELLS


@pytest.fixture(scope="session")
def small_re_pe() -> PseudoExtremaSet:
    """Degree-7 pseudo-extrema whose first pair needs Lebedev grouping."""
    return PseudoExtremaSet(np.array([SMALL_RE_REAL]), np.array(SMALL_RE_PAIRS))


@pytest.fixture(scope="session")
def disk8_tableau() -> ShuOsherTableau:
    """Tableau of the second-order disk polynomial with S=8 at dt=1."""
    poly = StabilityPolynomial(disk_polynomial_pe(8, 2), order=2, dt=1.0)
    return build_tableau(poly)


@pytest.fixture(scope="session")
def rk3_tableau() -> ShuOsherTableau:
    """Three-stage tableau of the third-order Taylor polynomial of exp(z)."""
    poly = StabilityPolynomial(exponential_taylor_pe(3), order=3, dt=0.01)
    return build_tableau(poly, allow_negative_beta=True, lebedev_grouping=False)


@pytest.fixture(scope="session")
def circle_order3_result(circle_spectrum) -> OptimizeResult:
    """Largest S=16, p=3 timestep on the upwind circle, to 1% in dt."""
    cfg = make_config({"degree": 16, "order": 3, "bisection_rtol": 1e-2})
    return find_max_dt(cfg, circle_spectrum)


# =============================================================================
# Helper Functions
# =============================================================================


def random_pe(rng: np.random.Generator, n_real: int, n_upper: int) -> PseudoExtremaSet:
    """Random pseudo-extrema in the left half-plane."""
    real = -rng.uniform(0.5, 20.0, size=n_real)
    upper = -rng.uniform(0.5, 10.0, size=n_upper) + 1j * rng.uniform(0.5, 10.0, size=n_upper)
    return PseudoExtremaSet(real, upper)
