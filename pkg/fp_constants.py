"""
fp_constants.py — Versioned defaults schema for fokkerid.

Every numeric default used by the solver, the presets and the Landweber iteration lives
here. Command-line overrides (`--set key=value`) are validated against SCHEMA before any
computation starts; the accepted overrides are copied into the run manifest together with
SCHEMA_VERSION.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

from error_utils import ConfigurationError

# Bump when a default changes meaning or a key is renamed
SCHEMA_VERSION = "1"


# =============================================================================
# PHYSICAL DEFAULTS (SI)
# =============================================================================

GYROMAGNETIC_RATIO = 1.75e11         # rad s^-1 T^-1
DAMPING = 0.1                        # alpha_hat
VACUUM_PERMEABILITY = 4e-7 * math.pi  # T m A^-1
SATURATION_MAGNETIZATION = 474e3     # A m^-1, magnetite
ANISOTROPY_CONSTANT = 1000.0         # J m^-3
# Diffusion rate. With a 10 mT field the drift rate gamma~*alpha_hat*B is about 1.7e8 s^-1,
# so 5e7 s^-1 keeps drift and diffusion within a factor of four of each other.
DIFFUSION = 5.0e7                    # s^-1

FIELD_AMPLITUDE = 0.01               # T (10 mT)


# =============================================================================
# GRID DEFAULTS
# =============================================================================

# One rotation of the case-3 axis over the horizon; 200 steps put ~11 steps on the
# fastest drift time 1/(gamma~ alpha_hat 10 mT) and 200 on a waveform period.
TIME_HORIZON = 1.0e-7                # s
TIME_STEPS = 200
FINE_LEVEL = 5
COARSE_LEVEL = 4
NOISE_LADDER = (0.0, 0.005, 0.01, 0.02, 0.05)
DEFAULT_SEED = 0


# =============================================================================
# LANDWEBER DEFAULTS
# =============================================================================

ARMIJO_FACTOR = 0.7
ARMIJO_MAX_STEPS = 20
DECREASE_TOL = 1e-4
MAX_ITERATIONS = 200
DISCREPANCY_TAU = 1.1
STEP_SAFETY = 0.9                    # omega = STEP_SAFETY / ||F'||^2
POWER_ITERATIONS = 30
POWER_TOL = 1e-4
BOOTSTRAP_ITERATIONS = 30

# Linear solves inside each time step must reach this relative residual
LINEAR_SOLVE_RTOL = 1e-10


# =============================================================================
# SCHEMA
# =============================================================================

@dataclass(frozen=True)
class SchemaEntry:
    """One overridable setting."""
    section: str            # "scenario", "constants" or "landweber"
    field: str              # attribute name on the target dataclass
    kind: type              # int, float, bool or list (of floats)
    default: Any
    description: str
    minimum: float | None = None
    maximum: float | None = None
    exclusive: bool = False  # bounds are strict
    allow_auto: bool = False  # "auto" -> None (derived at run time)


SCHEMA: dict[str, SchemaEntry] = {
    # --- scenario ---
    "t_end": SchemaEntry("scenario", "t_end", float, TIME_HORIZON, "time horizon T in seconds", 0.0, None, exclusive=True),
    "n_steps": SchemaEntry("scenario", "n_steps", int, TIME_STEPS, "number of implicit Euler steps", 1, None),
    "fine_level": SchemaEntry("scenario", "fine_level", int, FINE_LEVEL, "icosphere level for data generation", 0, 7),
    "coarse_level": SchemaEntry("scenario", "coarse_level", int, COARSE_LEVEL, "icosphere level for reconstruction", 0, 7),
    "seed": SchemaEntry("scenario", "seed", int, DEFAULT_SEED, "noise seed", 0, None),
    "noise_levels": SchemaEntry("scenario", "noise_levels", list, list(NOISE_LADDER), "relative noise levels in [0, 1)", 0.0, 1.0),
    "observation_gain": SchemaEntry("scenario", "observation_gain", float, 1.0, "scalar receive sensitivity applied to G", 0.0, None, exclusive=True),
    # --- constants ---
    "gamma": SchemaEntry("constants", "gamma", float, GYROMAGNETIC_RATIO, "gyromagnetic ratio", 0.0, None, exclusive=True),
    "alpha_hat": SchemaEntry("constants", "alpha_hat", float, DAMPING, "damping factor", 0.0, None, exclusive=True),
    "mu0": SchemaEntry("constants", "mu0", float, VACUUM_PERMEABILITY, "vacuum permeability", 0.0, None, exclusive=True),
    "k_anis": SchemaEntry("constants", "K_anis", float, ANISOTROPY_CONSTANT, "uniaxial anisotropy constant", 0.0, None),
    "m_s": SchemaEntry("constants", "M_S", float, SATURATION_MAGNETIZATION, "saturation magnetization", 0.0, None, exclusive=True),
    "lambda": SchemaEntry("constants", "lam", float, DIFFUSION, "diffusion rate", 0.0, None, exclusive=True),
    # --- landweber ---
    "omega": SchemaEntry("landweber", "omega", float, None, "step length; auto = power-iteration estimate", 0.0, None, exclusive=True, allow_auto=True),
    "armijo_factor": SchemaEntry("landweber", "armijo_factor", float, ARMIJO_FACTOR, "Armijo reduction factor", 0.0, 1.0, exclusive=True),
    "j_max": SchemaEntry("landweber", "j_max", int, ARMIJO_MAX_STEPS, "Armijo trials per iteration", 1, None),
    "tol": SchemaEntry("landweber", "tol", float, DECREASE_TOL, "relative discrepancy decrease for acceptance", 0.0, None, exclusive=True),
    "k_max": SchemaEntry("landweber", "k_max", int, MAX_ITERATIONS, "maximum Landweber iterations", 1, None),
    "tau": SchemaEntry("landweber", "tau", float, DISCREPANCY_TAU, "discrepancy principle factor", 1.0, None, exclusive=True),
    "epsilon_time": SchemaEntry("landweber", "epsilon_time", float, None, "time smoothing strength; auto = T/10", 0.0, None, allow_auto=True),
    "epsilon_space": SchemaEntry("landweber", "epsilon_space", float, None, "space smoothing strength; auto = coarse mesh diameter", 0.0, None, allow_auto=True),
    "find_initial_value": SchemaEntry("landweber", "find_initial_value", bool, True, "run the unsmoothed initial-value search first (easy-axis case)"),
    "store_iterates": SchemaEntry("landweber", "store_iterates", bool, True, "keep every iterate and continue past the discrepancy principle"),
    "bootstrap_k_max": SchemaEntry("landweber", "bootstrap_k_max", int, BOOTSTRAP_ITERATIONS, "iterations of the initial-value search", 1, None),
    "power_iterations": SchemaEntry("landweber", "power_iterations", int, POWER_ITERATIONS, "power iterations for the step length", 1, None),
    "step_safety": SchemaEntry("landweber", "step_safety", float, STEP_SAFETY, "safety factor on 1/||F'||^2", 0.0, 1.0, exclusive=True),
    "armijo_workers": SchemaEntry("landweber", "armijo_workers", int, 1, "parallel Armijo trial solves", 1, 64),
    "step_seed": SchemaEntry("landweber", "step_seed", int, 0, "seed of the power-iteration start vector", 0, None),
}


def _parse_scalar(key: str, entry: SchemaEntry, raw: str) -> Any:
    text = raw.strip()
    if entry.allow_auto and text.lower() in ("auto", "none", ""):
        return None
    if entry.kind is bool:
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(key, raw, "expected a boolean")
    try:
        value = int(text) if entry.kind is int else float(text)
    except ValueError:
        raise ConfigurationError(key, raw, f"expected {entry.kind.__name__}") from None
    if entry.kind is float and not math.isfinite(value):
        raise ConfigurationError(key, raw, "must be finite")
    return value


def _check_bounds(key: str, entry: SchemaEntry, value: float) -> None:
    lo, hi = entry.minimum, entry.maximum
    if lo is not None and (value < lo or (entry.exclusive and value == lo)):
        raise ConfigurationError(key, value, f"must be {'>' if entry.exclusive else '>='} {lo}")
    if hi is not None and (value > hi or (entry.exclusive and value == hi)):
        raise ConfigurationError(key, value, f"must be {'<' if entry.exclusive else '<='} {hi}")


def validate_value(key: str, value: Any) -> Any:
    """Validate an already-typed value (e.g. from a scenario file) against the schema."""
    entry = SCHEMA.get(key)
    if entry is None:
        raise ConfigurationError(key, value, "unknown setting")
    if value is None:
        if entry.allow_auto:
            return None
        raise ConfigurationError(key, value, "a value is required")
    if entry.kind is list:
        values = [float(v) for v in value]
        for v in values:
            # noise levels live in [0, 1)
            if not 0.0 <= v < 1.0:
                raise ConfigurationError(key, v, "must lie in [0, 1)")
        return values
    if entry.kind is bool:
        return bool(value)
    if entry.kind is int and (isinstance(value, bool) or int(value) != value):
        raise ConfigurationError(key, value, "expected an integer")
    typed = entry.kind(value)
    _check_bounds(key, entry, typed)
    return typed


def parse_overrides(pairs: list[str] | None) -> dict[str, Any]:
    """Parse and validate `key=value` strings.

    Returns:
        Mapping of schema key to typed value, in the order given.

    Raises:
        ConfigurationError: Unknown key, malformed pair or out-of-range value.
    """
    overrides: dict[str, Any] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(pair, pair, "expected key=value")
        key, raw = (part.strip() for part in pair.split("=", 1))
        entry = SCHEMA.get(key)
        if entry is None:
            raise ConfigurationError(key, raw, "unknown setting")
        if entry.kind is list:
            items = [item for item in raw.replace(";", ",").split(",") if item.strip()]
            try:
                overrides[key] = validate_value(key, [float(item) for item in items])
            except ValueError:
                raise ConfigurationError(key, raw, "expected a comma-separated list of numbers") from None
            continue
        value = _parse_scalar(key, entry, raw)
        overrides[key] = validate_value(key, value)
    return overrides


def section_overrides(overrides: dict[str, Any], section: str) -> dict[str, Any]:
    """Select overrides of one section, keyed by the target dataclass field name."""
    return {SCHEMA[key].field: value for key, value in overrides.items() if SCHEMA[key].section == section}


def section_defaults(section: str) -> dict[str, Any]:
    return {entry.field: entry.default for entry in SCHEMA.values() if entry.section == section}


# =============================================================================
# PRESET WAVEFORMS
# =============================================================================
# Waveforms are given in "cycles per horizon" so they scale with t_end.

# Case 1: rotating field in the xy-plane with a slower z component
CASE1_TRUE_FIELD = {
    "kind": "lissajous",
    "amplitude": [FIELD_AMPLITUDE, FIELD_AMPLITUDE, 0.5 * FIELD_AMPLITUDE],
    "cycles": [1.0, 1.0, 0.5],
    "phase": [0.0, 0.5 * math.pi, 0.0],
}
CASE1_INITIAL_FIELD = {"kind": "constant", "vector": [0.0, 0.0, 0.0]}

# Case 2: static uniaxial anisotropy along y, started from x, under a field whose
# direction varies quickly (mutually incommensurate frequencies per axis)
CASE2_BACKGROUND_FIELD = {
    "kind": "lissajous",
    "amplitude": [FIELD_AMPLITUDE, FIELD_AMPLITUDE, FIELD_AMPLITUDE],
    "cycles": [3.0, 3.0 * math.sqrt(2.0), 3.0 * math.sqrt(3.0)],
    "phase": [0.0, 0.5, 1.0],
}
CASE2_TRUE_LANDSCAPE = {"kind": "uniaxial", "axis": [0.0, 1.0, 0.0]}
CASE2_INITIAL_LANDSCAPE = {"kind": "uniaxial", "axis": [1.0, 0.0, 0.0]}

# Case 3: easy axis rotating once in the xy-plane; "10 mT in all directions" read as
# a constant field of magnitude 10 mT along (1, 1, 1)/sqrt(3)
CASE3_BACKGROUND_FIELD = {"kind": "constant", "vector": [FIELD_AMPLITUDE / math.sqrt(3.0)] * 3}
CASE3_TRUE_AXIS = {"kind": "rotation", "cycles": 1.0}
CASE3_INITIAL_AXIS = {"kind": "constant", "vector": [1.0, 0.0, 0.0]}
