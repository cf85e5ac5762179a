"""
harness.py — Synthetic experiments: scenarios, two-grid measurements, noise and error metrics.

Data are generated on the fine mesh, interpolated to the coarse mesh and observed there;
reconstructions always run on the coarse mesh, so the solver that produced the data is
never the one inverting it. Waveforms and landscapes are described by small JSON-able
spec dicts ("constant", "lissajous", "rotation", "uniaxial", "file") so a scenario file
fully determines an experiment.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from error_utils import ConfigurationError, EvaluationError
from fp_constants import (
    CASE1_INITIAL_FIELD,
    CASE1_TRUE_FIELD,
    CASE2_BACKGROUND_FIELD,
    CASE2_INITIAL_LANDSCAPE,
    CASE2_TRUE_LANDSCAPE,
    CASE3_BACKGROUND_FIELD,
    CASE3_INITIAL_AXIS,
    CASE3_TRUE_AXIS,
    COARSE_LEVEL,
    DEFAULT_SEED,
    FINE_LEVEL,
    NOISE_LADDER,
    TIME_HORIZON,
    TIME_STEPS,
    section_overrides,
    validate_value,
)
from geometry import DiscreteOperators, SphereMesh, build_icosphere, assemble_operators, interpolate, validate_level
from inversion import ForwardProblem, ReconstructionRun
from log_utils import verbose_log
from model import (
    AnisotropyLandscape,
    EasyAxis,
    FieldWaveform,
    Parameter,
    ParameterCase,
    PhysicalConstants,
    TimeGrid,
    check_parameter,
    parameter_norm,
    read_parameter,
)
from observation import ObservationMode, ObservationSeries, observation_norm, observe
from pde import StateField, uniform_density
from version import SCENARIO_FORMAT

MeshProvider = Callable[[int], SphereMesh]

_SCENARIO_SCALARS = ("t_end", "n_steps", "fine_level", "coarse_level", "seed", "observation_gain")


# =============================================================================
# WAVEFORM AND LANDSCAPE SPECS
# =============================================================================

def _vector(spec: dict, key: str, default: Any = None) -> np.ndarray:
    raw = spec.get(key, default)
    if raw is None:
        raise ConfigurationError(f"{spec.get('kind')}.{key}", None, "missing")
    values = np.broadcast_to(np.asarray(raw, dtype=float), (3,))
    if not np.all(np.isfinite(values)):
        raise ConfigurationError(f"{spec.get('kind')}.{key}", raw, "must be finite")
    return np.array(values)


def realize_waveform(spec: dict, time_grid: TimeGrid) -> np.ndarray:
    """Sample a vector waveform spec at every grid time; shape (n_samples, 3).

    Frequencies are given in cycles per horizon, so a waveform keeps its shape when
    t_end changes.
    """
    kind = spec.get("kind")
    t = time_grid.times / time_grid.t_end
    if kind == "constant":
        return np.tile(_vector(spec, "vector"), (time_grid.n_samples, 1))
    if kind == "lissajous":
        amplitude = _vector(spec, "amplitude")
        cycles = _vector(spec, "cycles")
        phase = _vector(spec, "phase", 0.0)
        return amplitude * np.sin(2.0 * math.pi * np.outer(t, cycles) + phase)
    if kind == "rotation":
        cycles = float(spec.get("cycles", 1.0))
        amplitude = float(spec.get("amplitude", 1.0))
        angle = 2.0 * math.pi * cycles * t + float(spec.get("phase", 0.0))
        return amplitude * np.column_stack([np.cos(angle), np.sin(angle), np.zeros_like(angle)])
    raise ConfigurationError("waveform.kind", kind, "expected constant, lissajous or rotation")


def _realize_landscape(spec: dict, mesh: SphereMesh) -> np.ndarray:
    kind = spec.get("kind")
    m = mesh.circumcenters
    if kind == "uniaxial":
        axis = _vector(spec, "axis")
        norm = np.linalg.norm(axis)
        if norm == 0:
            raise ConfigurationError("uniaxial.axis", spec.get("axis"), "axis must be non-zero")
        axis = axis / norm
        return float(spec.get("strength", 1.0)) * np.outer(m @ axis, axis)
    if kind == "constant":
        return np.tile(_vector(spec, "vector"), (mesh.n_cells, 1))
    raise ConfigurationError("landscape.kind", kind, "expected uniaxial or constant")


def realize_parameter(spec: dict, case: ParameterCase, mesh: SphereMesh, time_grid: TimeGrid,
                      base_dir: Path | None = None) -> Parameter:
    """Turn a spec dict into a Parameter of the given case on (mesh, time_grid).

    Raises:
        ConfigurationError: unknown kind or malformed fields.
        ShapeError: a file parameter does not match the mesh or grid.
    """
    case = ParameterCase(case)
    if spec.get("kind") == "file":
        path = Path(spec["path"])
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        p = read_parameter(path, case)
    elif case is ParameterCase.ANISOTROPY_LANDSCAPE:
        p = AnisotropyLandscape(_realize_landscape(spec, mesh))
    elif case is ParameterCase.FIELD_WAVEFORM:
        p = FieldWaveform(realize_waveform(spec, time_grid))
    else:
        p = EasyAxis(realize_waveform(spec, time_grid))
    check_parameter(p, mesh, time_grid)
    return p


def initial_density(spec: dict, mesh: SphereMesh) -> np.ndarray:
    """Initial density u0 with unit mass on the mesh."""
    kind = spec.get("kind", "uniform")
    if kind == "uniform":
        return uniform_density(mesh)
    if kind == "von_mises":
        direction = _vector(spec, "direction")
        direction = direction / np.linalg.norm(direction)
        kappa = float(spec.get("concentration", 1.0))
        if not kappa >= 0:
            raise ConfigurationError("von_mises.concentration", kappa, "must be non-negative")
        weights = np.exp(kappa * (mesh.circumcenters @ direction - 1.0))
        return weights / float(weights @ mesh.cell_areas)
    raise ConfigurationError("initial_density.kind", kind, "expected uniform or von_mises")


# =============================================================================
# SCENARIO
# =============================================================================

@dataclass(frozen=True)
class Scenario:
    name: str
    case: ParameterCase
    ground_truth: dict | None
    initial_guess: dict
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    fine_level: int = FINE_LEVEL
    coarse_level: int = COARSE_LEVEL
    t_end: float = TIME_HORIZON
    n_steps: int = TIME_STEPS
    background: dict | None = None
    initial_density: dict = field(default_factory=lambda: {"kind": "uniform"})
    noise_levels: tuple[float, ...] = NOISE_LADDER
    seed: int = DEFAULT_SEED
    observation_mode: ObservationMode = ObservationMode.EXPECTATION
    observation_gain: float = 1.0
    description: str = ""
    source_dir: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "case", ParameterCase(self.case))
        object.__setattr__(self, "observation_mode", ObservationMode(self.observation_mode))
        fine, coarse = validate_level(self.fine_level), validate_level(self.coarse_level)
        if fine <= coarse:
            raise ConfigurationError("fine_level", fine, f"must exceed coarse_level ({coarse})")
        levels = tuple(validate_value("noise_levels", list(self.noise_levels)))
        object.__setattr__(self, "noise_levels", levels)
        if not self.observation_gain > 0:
            raise ConfigurationError("observation_gain", self.observation_gain, "must be positive")
        if not isinstance(self.initial_guess, dict) or "kind" not in self.initial_guess:
            raise ConfigurationError("initial_guess", self.initial_guess, "expected a spec with a 'kind'")
        self.time_grid  # validates t_end and n_steps

    @property
    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.t_end, self.n_steps)

    def to_dict(self) -> dict:
        return {
            "format": SCENARIO_FORMAT,
            "name": self.name,
            "description": self.description,
            "case": int(self.case),
            "ground_truth": self.ground_truth,
            "initial_guess": self.initial_guess,
            "background": self.background,
            "initial_density": self.initial_density,
            "constants": self.constants.to_dict(),
            "fine_level": self.fine_level,
            "coarse_level": self.coarse_level,
            "t_end": self.t_end,
            "n_steps": self.n_steps,
            "noise_levels": list(self.noise_levels),
            "seed": self.seed,
            "observation_mode": self.observation_mode.value,
            "observation_gain": self.observation_gain,
        }

    @classmethod
    def from_dict(cls, data: dict, source_dir: Path | None = None) -> "Scenario":
        if data.get("format") != SCENARIO_FORMAT:
            raise ConfigurationError("format", data.get("format"), f"expected {SCENARIO_FORMAT}")
        for key in ("name", "case", "initial_guess"):
            if key not in data:
                raise ConfigurationError(key, None, "missing from scenario file")
        try:
            constants = PhysicalConstants(**data.get("constants", {}))
        except TypeError as exc:
            raise ConfigurationError("constants", data.get("constants"), str(exc)) from None
        scalars = {key: validate_value(key, data[key]) for key in _SCENARIO_SCALARS if key in data}
        if "noise_levels" in data:
            scalars["noise_levels"] = tuple(validate_value("noise_levels", data["noise_levels"]))
        try:
            case = ParameterCase(data["case"])
            mode = ObservationMode(data.get("observation_mode", ObservationMode.EXPECTATION.value))
        except ValueError as exc:
            raise ConfigurationError("case", data["case"], str(exc)) from None
        return cls(
            name=str(data["name"]),
            case=case,
            ground_truth=data.get("ground_truth"),
            initial_guess=data["initial_guess"],
            constants=constants,
            background=data.get("background"),
            initial_density=data.get("initial_density") or {"kind": "uniform"},
            observation_mode=mode,
            description=str(data.get("description", "")),
            source_dir=source_dir,
            **scalars,
        )


def save_scenario(path: Path, scenario: Scenario) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scenario.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_scenario(path: Path) -> Scenario:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return Scenario.from_dict(data, source_dir=Path(path).resolve().parent)


def apply_scenario_overrides(scenario: Scenario, overrides: dict) -> Scenario:
    """Apply validated `scenario` and `constants` schema overrides."""
    changes = section_overrides(overrides, "scenario")
    if "noise_levels" in changes:
        changes["noise_levels"] = tuple(changes["noise_levels"])
    constants = section_overrides(overrides, "constants")
    if constants:
        changes["constants"] = replace(scenario.constants, **constants)
    return replace(scenario, **changes) if changes else scenario


# =============================================================================
# PRESETS
# =============================================================================

def preset_case1() -> Scenario:
    """Field-waveform identification without anisotropy."""
    return Scenario(
        name="case1",
        case=ParameterCase.FIELD_WAVEFORM,
        ground_truth=copy.deepcopy(CASE1_TRUE_FIELD),
        initial_guess=copy.deepcopy(CASE1_INITIAL_FIELD),
        constants=PhysicalConstants(K_anis=0.0),
        description="Lissajous field (10 mT, one xy rotation, half a z cycle); phi = 0.",
    )


def preset_case2() -> Scenario:
    """Static uniaxial landscape along y, started from x, under a rapidly turning field."""
    return Scenario(
        name="case2",
        case=ParameterCase.ANISOTROPY_LANDSCAPE,
        ground_truth=copy.deepcopy(CASE2_TRUE_LANDSCAPE),
        initial_guess=copy.deepcopy(CASE2_INITIAL_LANDSCAPE),
        background=copy.deepcopy(CASE2_BACKGROUND_FIELD),
        description="Uniaxial phi = (m.e_y) e_y; Lissajous background with incommensurate frequencies.",
    )


def preset_case3() -> Scenario:
    """Easy axis rotating in the xy-plane under a constant field."""
    return Scenario(
        name="case3",
        case=ParameterCase.EASY_AXIS,
        ground_truth=copy.deepcopy(CASE3_TRUE_AXIS),
        initial_guess=copy.deepcopy(CASE3_INITIAL_AXIS),
        background=copy.deepcopy(CASE3_BACKGROUND_FIELD),
        description="n(t) = (cos wt, sin wt, 0), one rotation; constant 10 mT along (1,1,1)/sqrt(3) "
                    "(reading of 'a constant 10 mT in all directions').",
    )


PRESETS: dict[str, Callable[[], Scenario]] = {
    "case1": preset_case1,
    "case2": preset_case2,
    "case3": preset_case3,
}


# =============================================================================
# PROBLEMS AND MEASUREMENTS
# =============================================================================

def build_problem(scenario: Scenario, operators: DiscreteOperators) -> ForwardProblem:
    grid = scenario.time_grid
    mesh = operators.mesh
    background = None
    if scenario.case is not ParameterCase.FIELD_WAVEFORM and scenario.background is not None:
        background = FieldWaveform(realize_waveform(scenario.background, grid))
    return ForwardProblem(
        operators=operators,
        constants=scenario.constants,
        time_grid=grid,
        u0=initial_density(scenario.initial_density, mesh),
        mode=scenario.observation_mode,
        background=background,
        gain=scenario.observation_gain,
    )


def ground_truth(scenario: Scenario, problem: ForwardProblem) -> Parameter:
    if scenario.ground_truth is None:
        raise EvaluationError(f"scenario '{scenario.name}' has no ground-truth parameter")
    return realize_parameter(scenario.ground_truth, scenario.case, problem.mesh, problem.time_grid,
                             scenario.source_dir)


def initial_guess(scenario: Scenario, problem: ForwardProblem) -> Parameter:
    return realize_parameter(scenario.initial_guess, scenario.case, problem.mesh, problem.time_grid,
                             scenario.source_dir)


@dataclass(eq=False)
class Measurement:
    clean: ObservationSeries
    noisy: dict[float, ObservationSeries]
    deltas: dict[float, float]
    state: StateField          # fine solution interpolated to the coarse mesh


def _noise_stream(seed: int, level: float) -> np.random.Generator:
    # keyed by (seed, level) so adding a level never changes the others
    return np.random.default_rng([int(seed), int(round(level * 1e6))])


def add_noise(clean: ObservationSeries, level: float, seed: int,
              mesh: SphereMesh) -> tuple[ObservationSeries, float]:
    """i.i.d. Gaussian noise with sigma = level * max |y|; returns (y_delta, delta)."""
    if level == 0:
        return clean, 0.0
    sigma = level * float(np.max(np.abs(clean.values)))
    noise = _noise_stream(seed, level).normal(0.0, sigma, size=clean.values.shape)
    noisy = clean.with_values(clean.values + noise)
    return noisy, observation_norm(noisy.minus(clean), mesh)


def generate_measurement(scenario: Scenario, mesh_provider: MeshProvider | None = None) -> Measurement:
    """Fine-mesh forward solve, interpolation to the coarse mesh, observation, noise.

    Raises:
        EvaluationError: the scenario has no ground truth to simulate.
        SolverError: propagated from the fine forward solve.
    """
    provider = mesh_provider or build_icosphere
    fine = provider(scenario.fine_level)
    coarse = provider(scenario.coarse_level)
    fine_problem = build_problem(scenario, assemble_operators(fine, scenario.constants.lam))
    truth = ground_truth(scenario, fine_problem)

    verbose_log(f"Simulating {scenario.name} on level {scenario.fine_level} ({fine.n_cells} cells)")
    fine_state = fine_problem.solve(truth)
    grid = scenario.time_grid
    coarse_state = StateField(interpolate(fine, fine_state.values, coarse), grid, coarse)
    clean = observe(coarse_state, scenario.observation_mode, scenario.observation_gain)

    noisy: dict[float, ObservationSeries] = {}
    deltas: dict[float, float] = {}
    for level in scenario.noise_levels:
        noisy[level], deltas[level] = add_noise(clean, level, scenario.seed, coarse)
        verbose_log(f"  noise {level:g}: delta = {deltas[level]:.6e}")
    return Measurement(clean=clean, noisy=noisy, deltas=deltas, state=coarse_state)


def model_mismatch(scenario: Scenario, clean: ObservationSeries, problem: ForwardProblem) -> float:
    """||G S_coarse(p_true) - y_clean||_Y; strictly positive while the two grids differ."""
    _, y_coarse = problem.forward(ground_truth(scenario, problem))
    return problem.misfit(y_coarse, clean)


# =============================================================================
# ERROR METRICS
# =============================================================================

def _h1_seminorm_squared(p: Parameter, problem: ForwardProblem) -> float:
    # time derivatives are taken in t / T and integrated with the L2 weights
    grid = problem.time_grid
    time_scale = grid.t_end ** 2 / grid.dt
    values = p.values
    if isinstance(p, AnisotropyLandscape):
        laplacian = problem.operators.laplacian
        if not p.time_dependent:
            return float(-np.einsum("ik,ik->", values, laplacian @ values))
        spatial = np.array([-np.einsum("ik,ik->", v, laplacian @ v) for v in values])
        jumps = np.einsum("nij,nij->ni", np.diff(values, axis=0), np.diff(values, axis=0))
        return float(grid.weights @ spatial + (jumps @ problem.mesh.cell_areas).sum() * time_scale)
    jumps = np.diff(values, axis=0)
    return float(np.sum(jumps ** 2) * time_scale)


def h1_norm(p: Parameter, problem: ForwardProblem) -> float:
    """Discrete H1: L2 part plus forward-difference (time) or Dirichlet-energy (space) part."""
    l2 = parameter_norm(p, problem.mesh, problem.time_grid)
    return math.sqrt(l2 ** 2 + max(_h1_seminorm_squared(p, problem), 0.0))


def relative_errors(p_rec: Parameter, p_true: Parameter, problem: ForwardProblem) -> tuple[float, float]:
    """Relative (L2, H1) errors; easy-axis trajectories are compared after normalization.

    Both errors are divided by the L2 norm of the ground truth, so the H1 error never
    falls below the L2 error.

    Raises:
        EvaluationError: the ground truth has zero norm.
    """
    if isinstance(p_true, EasyAxis):
        p_rec, p_true = p_rec.normalized(), p_true.normalized()
    diff = p_rec.shifted(p_true, -1.0)
    mesh, grid = problem.mesh, problem.time_grid
    ref_l2 = parameter_norm(p_true, mesh, grid)
    if ref_l2 == 0:
        raise EvaluationError("ground truth has zero norm; relative errors are undefined")
    return parameter_norm(diff, mesh, grid) / ref_l2, h1_norm(diff, problem) / ref_l2


def error_function(scenario: Scenario, problem: ForwardProblem) -> Callable[[Parameter], float] | None:
    """Relative L2 error against the ground truth, or None without one."""
    if scenario.ground_truth is None:
        return None
    truth = ground_truth(scenario, problem)
    return lambda p: relative_errors(p, truth, problem)[0]


@dataclass
class ErrorRow:
    rule: str                  # "discrepancy", "best" or "final"
    iteration: int
    discrepancy: float
    l2: float
    h1: float


@dataclass
class ErrorReport:
    case: ParameterCase
    noise_level: float
    seed: int
    rows: list[ErrorRow] = field(default_factory=list)

    def row(self, rule: str) -> ErrorRow | None:
        return next((row for row in self.rows if row.rule == rule), None)


def evaluate(run: ReconstructionRun, scenario: Scenario, problem: ForwardProblem,
             noise_level: float = 0.0) -> ErrorReport:
    """Errors at the discrepancy-principle iterate, the best stored iterate and the last one.

    Raises:
        EvaluationError: the scenario has no ground truth.
    """
    truth = ground_truth(scenario, problem)
    discrepancy = {record.index: record.discrepancy for record in run.records}
    report = ErrorReport(case=scenario.case, noise_level=noise_level, seed=scenario.seed)

    candidates = dict(run.iterates)
    candidates.setdefault(run.last_index, run.final)
    if run.best_index is not None and run.best is not None:
        candidates.setdefault(run.best_index, run.best)
    errors = {index: relative_errors(p, truth, problem) for index, p in sorted(candidates.items())}

    if run.discrepancy_index is not None:
        p = run.parameter_at(run.discrepancy_index)
        if p is not None:
            l2, h1 = errors.get(run.discrepancy_index) or relative_errors(p, truth, problem)
            report.rows.append(ErrorRow("discrepancy", run.discrepancy_index,
                                        discrepancy[run.discrepancy_index], l2, h1))
    best = min(errors, key=lambda index: errors[index][0])
    report.rows.append(ErrorRow("best", best, discrepancy[best], *errors[best]))
    report.rows.append(ErrorRow("final", run.last_index, discrepancy[run.last_index], *errors[run.last_index]))
    return report


def noise_tag(level: float) -> str:
    """File tag of a noise level in percent: 0.05 -> '05', 0.005 -> '0p5'."""
    percent = round(level * 100.0, 10)
    if float(percent).is_integer():
        return f"{int(percent):02d}"
    return format(percent, "g").replace(".", "p")
