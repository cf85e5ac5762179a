"""
conftest.py — Shared pytest fixtures and test utilities for fokkerid.

This file is automatically loaded by pytest and provides:
- Isolated log and mesh-cache directories for the whole session
- Session-scoped meshes and operators for levels 1 and 2
- Factories for forward problems of all three parameter cases
- NumericsTestHelper for relative-closeness assertions
"""

import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path so we can import from the main package
sys.path.insert(0, str(Path(__file__).parent.parent))

# Keep logs and cached meshes out of the working tree; must happen before any import
# touches log_utils or the cache
_SESSION_DIR = Path(tempfile.mkdtemp(prefix="fokkerid_tests_"))
os.environ["FOKKERID_LOG_DIR"] = str(_SESSION_DIR / "logs")
os.environ["FOKKERID_CACHE_DIR"] = str(_SESSION_DIR / "cache")
os.environ.pop("FOKKERID_VERBOSE", None)

from geometry import assemble_operators, build_icosphere
from inversion import ForwardProblem
from model import (
    AnisotropyLandscape,
    EasyAxis,
    FieldWaveform,
    ParameterCase,
    PhysicalConstants,
    TimeGrid,
)
from observation import ObservationMode
from pde import uniform_density


# =============================================================================
# FIXTURES: Meshes and operators
# =============================================================================

@pytest.fixture(scope="session")
def constants():
    return PhysicalConstants()


@pytest.fixture(scope="session")
def mesh_l1():
    return build_icosphere(1)


@pytest.fixture(scope="session")
def mesh_l2():
    return build_icosphere(2)


@pytest.fixture(scope="session")
def operators_l1(mesh_l1, constants):
    return assemble_operators(mesh_l1, constants.lam)


@pytest.fixture(scope="session")
def operators_l2(mesh_l2, constants):
    return assemble_operators(mesh_l2, constants.lam)


@pytest.fixture
def small_grid():
    """Short horizon with a handful of steps: fast, but drift and diffusion both matter."""
    return TimeGrid(t_end=2e-8, n_steps=8)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


# =============================================================================
# FIXTURES: Forward problems
# =============================================================================

def sample_parameter(case: ParameterCase, mesh, grid: TimeGrid, time_dependent: bool = False):
    """A smooth, non-trivial parameter of the given case."""
    t = grid.times / grid.t_end
    if case is ParameterCase.FIELD_WAVEFORM:
        return FieldWaveform(0.01 * np.column_stack([np.sin(2 * np.pi * t), np.cos(2 * np.pi * t), 0.5 * t]))
    if case is ParameterCase.EASY_AXIS:
        return EasyAxis(np.column_stack([np.cos(np.pi * t), np.sin(np.pi * t), 0.2 * np.ones_like(t)]))
    axis = np.array([0.0, 1.0, 0.0])
    phi = np.outer(mesh.circumcenters @ axis, axis)
    if time_dependent:
        phi = np.stack([(1.0 + 0.5 * s) * phi for s in t])
    return AnisotropyLandscape(phi)


@pytest.fixture
def problem_factory(operators_l1, operators_l2, constants, small_grid):
    """Factory fixture: (problem, parameter) for a case on level 1 or 2."""
    def _create(case: ParameterCase, level: int = 2, grid: TimeGrid | None = None,
                mode: ObservationMode = ObservationMode.EXPECTATION, gain: float = 1.0,
                time_dependent: bool = False):
        operators = operators_l2 if level == 2 else operators_l1
        grid = grid or small_grid
        mesh = operators.mesh
        background = None
        if case is not ParameterCase.FIELD_WAVEFORM:
            t = grid.times / grid.t_end
            background = FieldWaveform(0.01 * np.column_stack([np.cos(2 * np.pi * t), np.sin(2 * np.pi * t),
                                                               0.3 * np.ones_like(t)]))
        problem = ForwardProblem(
            operators=operators,
            constants=constants,
            time_grid=grid,
            u0=uniform_density(mesh),
            mode=mode,
            background=background,
            gain=gain,
        )
        return problem, sample_parameter(case, mesh, grid, time_dependent)
    return _create


# =============================================================================
# TEST UTILITIES
# =============================================================================

class NumericsTestHelper:
    """Helper class for common numerical assertion patterns."""

    @staticmethod
    def relative_difference(a: float, b: float) -> float:
        scale = max(abs(a), abs(b), np.finfo(float).tiny)
        return abs(a - b) / scale

    @staticmethod
    def assert_relative_close(actual, expected, rtol: float, what: str = "value"):
        """Assert ||actual - expected|| <= rtol * ||expected|| (arrays or scalars)."""
        actual = np.asarray(actual, dtype=float)
        expected = np.asarray(expected, dtype=float)
        error = np.linalg.norm(actual - expected)
        scale = max(np.linalg.norm(expected), np.finfo(float).tiny)
        assert error <= rtol * scale, \
            f"{what}: relative error {error / scale:.3e} exceeds {rtol:.1e}"

    @classmethod
    def assert_inner_products_match(cls, lhs: float, rhs: float, rtol: float, what: str = "identity"):
        """Assert two sides of an adjoint identity agree relative to their size."""
        difference = cls.relative_difference(lhs, rhs)
        assert difference <= rtol, \
            f"{what}: {lhs:.12e} vs {rhs:.12e} (relative difference {difference:.3e})"


@pytest.fixture
def numerics():
    """Provide NumericsTestHelper instance."""
    return NumericsTestHelper()


@pytest.fixture
def session_dir():
    return _SESSION_DIR


# =============================================================================
# PYTEST CONFIGURATION
# =============================================================================

def pytest_configure(config):
    """Configure pytest with custom markers."""
    config.addinivalue_line(
        "markers", "slow: marks acceptance-scale runs (deselect with '-m \"not slow\"')"
    )
    config.addinivalue_line(
        "markers", "integration: marks end-to-end pipeline and CLI tests"
    )
    config.addinivalue_line(
        "markers", "unit: marks unit tests (small meshes, no files outside tmp)"
    )
