"""
error_utils.py — Domain exceptions, user hints and exit-code classification.

Every failure the numerical core can raise is one of the exceptions below, each carrying
structured attributes instead of a bare message. classify_numerical_error() maps them to a
user-facing message, an actionable hint and the CLI exit code. pipeline.classify_error()
builds on it to add stage context.
"""

from __future__ import annotations

import json


# =============================================================================
# EXIT CODES
# =============================================================================

EXIT_OK = 0
EXIT_CONFIG = 1   # usage, schema, grid mismatch
EXIT_IO = 2       # unreadable/unwritable files, corrupt cache
EXIT_NUMERICAL = 3


# =============================================================================
# USER HINTS
# =============================================================================

HINT_CONFIG = "Check the --set overrides against `python cli.py simulate --list-keys`."
HINT_GRID = "The measurement was produced with a different time grid; re-run simulate with the same scenario file."
HINT_MESH = "Use a refinement level between 0 and 7, or clear FOKKERID_CACHE_DIR if a cached mesh is corrupt."
HINT_SOLVER = "Reduce the time step (increase n_steps) or the field amplitude; large drift-to-diffusion ratios make the central flux stiff."
HINT_SMOOTHER = "Lower epsilon_time / epsilon_space; very strong smoothing makes the Riesz systems ill-conditioned."
HINT_IO = "Check that the path exists and is writable."
HINT_EVALUATION = "Supply a scenario file with a ground-truth parameter to obtain error tables."


# =============================================================================
# EXCEPTIONS
# =============================================================================

class ConfigurationError(Exception):
    """Raised when a configuration value or user input is invalid."""
    def __init__(self, key: str, value: object, reason: str):
        self.key = key
        self.value = value
        self.reason = reason
        super().__init__(f"Invalid value for '{key}': {value!r} ({reason})")


class ShapeError(ConfigurationError):
    """Raised when array dimensions do not match the mesh or time grid."""
    def __init__(self, what: str, expected: object, actual: object):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(what, actual, f"expected shape {expected}, got {actual}")


class GridMismatchError(ConfigurationError):
    """Raised when a measurement file does not sit on the scenario's time grid."""
    def __init__(self, expected: str, actual: str):
        self.expected = expected
        self.actual = actual
        super().__init__("time_grid", actual, f"measurement grid does not match scenario grid {expected}")


class MeshQualityError(Exception):
    """Raised for degenerate or non-closed triangulations."""
    def __init__(self, reason: str, min_area: float | None = None):
        self.reason = reason
        self.min_area = min_area
        detail = f" (smallest cell area {min_area:.3e})" if min_area is not None else ""
        super().__init__(f"Mesh quality check failed: {reason}{detail}")


class InterpolationError(Exception):
    """Raised when a target cell receives no source cells during transfer."""
    def __init__(self, empty_cells: int):
        self.empty_cells = empty_cells
        super().__init__(f"Interpolation left {empty_cells} target cell(s) without source values")


class SolverError(Exception):
    """Raised when a sparse linear solve inside a time step fails."""
    def __init__(self, stage: str, step: int, reason: str, iteration: int | None = None):
        self.stage = stage
        self.step = step
        self.reason = reason
        self.iteration = iteration
        where = f"{stage} step {step}"
        if iteration is not None:
            where += f" (Landweber iteration {iteration})"
        super().__init__(f"Linear solve failed at {where}: {reason}")

    def with_iteration(self, iteration: int) -> "SolverError":
        return SolverError(self.stage, self.step, self.reason, iteration=iteration)


class NumericalError(Exception):
    """Raised when a smoothing or estimation routine produces non-finite output."""
    def __init__(self, operation: str, reason: str):
        self.operation = operation
        self.reason = reason
        super().__init__(f"{operation} failed: {reason}")


class EvaluationError(Exception):
    """Raised when errors are requested but no ground truth is available."""
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"Evaluation not possible: {reason}")


# =============================================================================
# CLASSIFICATION
# =============================================================================

def classify_numerical_error(error: Exception) -> tuple[str, str | None, int]:
    """Map an exception to (user message, hint, exit code).

    Args:
        error: Any exception raised by the numerical core or by file IO.

    Returns:
        Tuple of (user_message, hint, exit_code). Unknown exceptions are treated as
        numerical failures since they originate inside a solve.
    """
    if isinstance(error, GridMismatchError):
        return str(error), HINT_GRID, EXIT_CONFIG
    if isinstance(error, ConfigurationError):
        hint = HINT_MESH if error.key == "level" else HINT_CONFIG
        return str(error), hint, EXIT_CONFIG
    if isinstance(error, EvaluationError):
        return str(error), HINT_EVALUATION, EXIT_CONFIG
    if isinstance(error, (OSError, json.JSONDecodeError, UnicodeDecodeError)):
        return f"File error: {error}", HINT_IO, EXIT_IO
    if isinstance(error, MeshQualityError):
        return str(error), HINT_MESH, EXIT_NUMERICAL
    if isinstance(error, SolverError):
        return str(error), HINT_SOLVER, EXIT_NUMERICAL
    if isinstance(error, NumericalError):
        return str(error), HINT_SMOOTHER, EXIT_NUMERICAL
    if isinstance(error, InterpolationError):
        return str(error), HINT_MESH, EXIT_NUMERICAL
    return f"Unexpected failure: {error}", None, EXIT_NUMERICAL
