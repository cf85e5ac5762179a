"""
inversion.py — Landweber iteration with Armijo backtracking for the drift parameters.

The forward operator is F = G ∘ S ∘ Γ: parameter -> drift -> density -> observation.
Its adjoint F'(p)* is evaluated with one backward adjoint solve per iteration
(compute_gradient). Gradients are mapped to Sobolev representers by the Riesz smoothers
(time: v - eps^2 v'' = f with Neumann ends; space: u - eps^2 Lap u + eps^4 Lap^2 u = f),
unless the run is the unsmoothed initial-value search.

Iteration (1-based, p_1 is the initial guess):

    grad_k  = R F'(p_{k-1})* (F(p_{k-1}) - y_delta)
    p_tmp_j = p_{k-1} - armijo_factor^(j-1) * omega * grad_k,   j = 1..j_max

The first trial whose relative discrepancy decrease exceeds `tol` is accepted. The
discrepancy principle records the first k with ||F(p_k) - y_delta|| <= tau * delta.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from error_utils import ConfigurationError, NumericalError, SolverError
from fp_constants import (
    ARMIJO_FACTOR,
    ARMIJO_MAX_STEPS,
    BOOTSTRAP_ITERATIONS,
    DECREASE_TOL,
    DISCREPANCY_TAU,
    MAX_ITERATIONS,
    POWER_ITERATIONS,
    POWER_TOL,
    STEP_SAFETY,
    section_defaults,
    section_overrides,
)
from geometry import DiscreteOperators, SphereMesh
from log_utils import log_warning, verbose_log
from model import (
    DriftField,
    EasyAxis,
    FieldWaveform,
    Parameter,
    ParameterCase,
    PhysicalConstants,
    TimeGrid,
    assemble_drift,
    gamma_adjoint_apply,
    gamma_derivative_apply,
    parameter_inner,
    parameter_norm,
)
from observation import (
    ObservationMode,
    ObservationSeries,
    observation_norm,
    observe,
    observe_adjoint,
)
from pde import StateField, solve_adjoint, solve_forward, solve_sensitivity, state_adjoint_product


# =============================================================================
# CONFIGURATION
# =============================================================================

@dataclass(frozen=True)
class LandweberConfig:
    omega: float | None = None          # None: estimate_step_length at p1
    armijo_factor: float = ARMIJO_FACTOR
    j_max: int = ARMIJO_MAX_STEPS
    tol: float = DECREASE_TOL
    k_max: int = MAX_ITERATIONS
    tau: float = DISCREPANCY_TAU
    epsilon_time: float | None = None   # None: T / 10
    epsilon_space: float | None = None  # None: coarse mesh diameter
    find_initial_value: bool = False    # True: unsmoothed search run
    store_iterates: bool = True
    bootstrap_k_max: int = BOOTSTRAP_ITERATIONS
    power_iterations: int = POWER_ITERATIONS
    step_safety: float = STEP_SAFETY
    armijo_workers: int = 1
    step_seed: int = 0

    def validate(self) -> "LandweberConfig":
        if self.omega is not None and not self.omega > 0:
            raise ConfigurationError("omega", self.omega, "step length must be positive")
        if not 0 < self.armijo_factor < 1:
            raise ConfigurationError("armijo_factor", self.armijo_factor, "must lie in (0, 1)")
        if not self.tau > 1:
            raise ConfigurationError("tau", self.tau, "must exceed 1")
        if not self.tol > 0:
            raise ConfigurationError("tol", self.tol, "must be positive")
        for key in ("j_max", "k_max", "bootstrap_k_max", "power_iterations", "armijo_workers"):
            if getattr(self, key) < 1:
                raise ConfigurationError(key, getattr(self, key), "must be at least 1")
        for key in ("epsilon_time", "epsilon_space"):
            value = getattr(self, key)
            if value is not None and value < 0:
                raise ConfigurationError(key, value, "must be non-negative")
        if not 0 < self.step_safety < 1:
            raise ConfigurationError("step_safety", self.step_safety, "must lie in (0, 1)")
        return self

    @classmethod
    def from_overrides(cls, overrides: dict) -> "LandweberConfig":
        values = section_defaults("landweber")
        values.update(section_overrides(overrides, "landweber"))
        return cls(**values).validate()

    def time_smoothing(self, time_grid: TimeGrid) -> float:
        return time_grid.t_end / 10.0 if self.epsilon_time is None else self.epsilon_time

    def space_smoothing(self, mesh: SphereMesh) -> float:
        return mesh.diameter if self.epsilon_space is None else self.epsilon_space

    def to_dict(self) -> dict:
        return asdict(self)


# =============================================================================
# FORWARD PROBLEM
# =============================================================================

@dataclass(eq=False)
class ForwardProblem:
    """Everything needed to evaluate F, F' and F'* on one mesh."""
    operators: DiscreteOperators
    constants: PhysicalConstants
    time_grid: TimeGrid
    u0: np.ndarray
    mode: ObservationMode = ObservationMode.EXPECTATION
    background: FieldWaveform | None = None
    gain: float = 1.0

    @property
    def mesh(self) -> SphereMesh:
        return self.operators.mesh

    def drift(self, p: Parameter) -> DriftField:
        return assemble_drift(p, self.constants, self.mesh, self.time_grid, self.background)

    def solve(self, p: Parameter) -> StateField:
        return solve_forward(self.drift(p), self.u0, self.operators, self.time_grid)

    def forward(self, p: Parameter) -> tuple[StateField, ObservationSeries]:
        state = self.solve(p)
        return state, observe(state, self.mode, self.gain)

    def misfit(self, y: ObservationSeries, y_delta: ObservationSeries) -> float:
        return observation_norm(y.minus(y_delta), self.mesh)

    def derivative(self, p: Parameter, direction: Parameter, state: StateField) -> ObservationSeries:
        """F'(p) h through the linearized forward solve."""
        increment = gamma_derivative_apply(p, direction, self.constants, self.mesh, self.time_grid)
        v = solve_sensitivity(self.drift(p), increment, state, self.operators, self.time_grid)
        return observe(v, self.mode, self.gain)

    def adjoint(self, p: Parameter, z: ObservationSeries, state: StateField) -> Parameter:
        """F'(p)* z in the L2 parameter inner product (no smoothing)."""
        source = observe_adjoint(z, self.mesh, self.gain)
        psi = solve_adjoint(self.drift(p), source, self.operators, self.time_grid)
        cofield = state_adjoint_product(state, psi, self.operators)
        return gamma_adjoint_apply(p, cofield, self.constants, self.mesh, self.time_grid)


# =============================================================================
# RIESZ SMOOTHERS
# =============================================================================

def riesz_smooth_time(f: np.ndarray, epsilon: float, time_grid: TimeGrid) -> np.ndarray:
    """Solve v - eps^2 v'' = f with v'(0) = v'(T) = 0 along axis 0.

    Central second differences with ghost-point reflection at both ends; the result is
    self-adjoint in the trapezoid inner product. Trailing axes are independent.
    """
    f = np.asarray(f, dtype=float)
    n = time_grid.n_samples
    if f.shape[0] != n:
        raise NumericalError("riesz_smooth_time", f"expected {n} samples, got {f.shape[0]}")
    if epsilon == 0:
        return f.copy()

    c = (epsilon / time_grid.dt) ** 2
    banded = np.zeros((3, n))
    banded[0, 1:] = -c
    banded[0, 1] = -2.0 * c
    banded[1, :] = 1.0 + 2.0 * c
    banded[2, :-1] = -c
    banded[2, n - 2] = -2.0 * c
    try:
        v = scipy.linalg.solve_banded((1, 1), banded, f.reshape(n, -1))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError("riesz_smooth_time", str(exc)) from exc
    if not np.all(np.isfinite(v)):
        raise NumericalError("riesz_smooth_time", "non-finite result")
    return v.reshape(f.shape)


def riesz_smooth_space(f: np.ndarray, operators: DiscreteOperators, epsilon: float) -> np.ndarray:
    """Solve u - eps^2 Lap u + eps^4 Lap^2 u = f per column; cells on axis 0.

    Multiplied by the mass matrix M the system is M - eps^2 L + eps^4 L M^-1 L, with L
    the integrated Laplace–Beltrami operator, which is symmetric positive definite.
    """
    f = np.asarray(f, dtype=float)
    if f.shape[0] != operators.mesh.n_cells:
        raise NumericalError("riesz_smooth_space", f"expected {operators.mesh.n_cells} cells, got {f.shape[0]}")
    if epsilon == 0:
        return f.copy()

    mass = operators.mass
    laplacian = operators.laplacian
    system = (sp.diags(mass) - epsilon ** 2 * laplacian
              + epsilon ** 4 * (laplacian @ sp.diags(1.0 / mass) @ laplacian)).tocsc()
    columns = f.reshape(len(mass), -1)
    try:
        u = spla.splu(system).solve(mass[:, None] * columns)
    except RuntimeError as exc:
        raise NumericalError("riesz_smooth_space", str(exc)) from exc
    if not np.all(np.isfinite(u)):
        raise NumericalError("riesz_smooth_space", "non-finite result")
    return u.reshape(f.shape)


def smooth_parameter(p: Parameter, config: LandweberConfig, problem: ForwardProblem) -> Parameter:
    """Apply the Riesz map of the parameter's Sobolev space."""
    grid = problem.time_grid
    if isinstance(p, (FieldWaveform, EasyAxis)):
        return p.with_values(riesz_smooth_time(p.values, config.time_smoothing(grid), grid))

    eps_space = config.space_smoothing(problem.mesh)
    if not p.time_dependent:
        return p.with_values(riesz_smooth_space(p.values, problem.operators, eps_space))

    values = riesz_smooth_time(p.values, config.time_smoothing(grid), grid)
    n_t, n_c, _ = values.shape
    per_cell = values.transpose(1, 0, 2).reshape(n_c, -1)
    smoothed = riesz_smooth_space(per_cell, problem.operators, eps_space)
    return p.with_values(smoothed.reshape(n_c, n_t, 3).transpose(1, 0, 2))


# =============================================================================
# GRADIENT AND STEP LENGTH
# =============================================================================

def compute_gradient(p: Parameter, residual: ObservationSeries, forward_state: StateField,
                     config: LandweberConfig, problem: ForwardProblem) -> Parameter:
    """Landweber direction F'(p)*(residual), smoothed unless config.find_initial_value.

    Args:
        residual: F(p) - y_delta.
        forward_state: S(Γ(p)) for the same p.
    """
    gradient = problem.adjoint(p, residual, forward_state)
    if config.find_initial_value:
        return gradient
    return smooth_parameter(gradient, config, problem)


@dataclass
class OperatorNormEstimate:
    squared_norm: float
    iterations: int
    converged: bool


def estimate_operator_norm(p_tilde: Parameter, problem: ForwardProblem, trials: int,
                           seed: int = 0, state: StateField | None = None) -> OperatorNormEstimate:
    """Power iteration on F'(p~)* F'(p~) for ||F'(p~)||^2 (Rayleigh quotient).

    The state S(Γ(p~)) is frozen; every iteration costs one sensitivity and one adjoint solve.
    """
    if trials < 1:
        raise ConfigurationError("power_iterations", trials, "need at least one trial")
    mesh, grid = problem.mesh, problem.time_grid
    state = state if state is not None else problem.solve(p_tilde)
    rng = np.random.default_rng(seed)
    x = p_tilde.with_values(rng.standard_normal(p_tilde.values.shape))
    x = x.scaled(1.0 / parameter_norm(x, mesh, grid))

    previous = None
    estimate = 0.0
    upper = 0.0
    for iteration in range(1, trials + 1):
        image = problem.derivative(p_tilde, x, state)
        back = problem.adjoint(p_tilde, image, state)
        estimate = parameter_inner(x, back, mesh, grid)
        back_norm = parameter_norm(back, mesh, grid)
        if back_norm == 0.0:
            return OperatorNormEstimate(0.0, iteration, True)
        x = back.scaled(1.0 / back_norm)
        if previous is not None and abs(estimate - previous) <= POWER_TOL * abs(estimate):
            return OperatorNormEstimate(estimate, iteration, True)
        previous = estimate
        # ||A x|| bounds the Rayleigh quotient from above for unit x
        upper = back_norm
    log_warning(f"Power iteration did not converge in {trials} trials (last estimate {estimate:.4e})")
    return OperatorNormEstimate(max(estimate, upper), trials, False)


def estimate_step_length(p_tilde: Parameter, problem: ForwardProblem, trials: int,
                         seed: int = 0, safety: float = STEP_SAFETY,
                         state: StateField | None = None) -> float:
    """omega = safety / ||F'(p~)||^2 from a power-iteration estimate."""
    estimate = estimate_operator_norm(p_tilde, problem, trials, seed=seed, state=state)
    if estimate.squared_norm <= 0 or not np.isfinite(estimate.squared_norm):
        log_warning("Derivative vanished during step-length estimation; using omega = safety factor")
        return safety
    omega = safety / estimate.squared_norm
    verbose_log(f"Step length: ||F'||^2 ~ {estimate.squared_norm:.4e} after {estimate.iterations} "
                f"power iterations -> omega = {omega:.4e}")
    return omega


# =============================================================================
# RUN RECORD
# =============================================================================

@dataclass
class IterationRecord:
    index: int
    discrepancy: float
    wall_time: float
    step: float | None = None       # accepted omega * armijo_factor^(j-1)
    armijo_trials: int = 0
    error: float | None = None      # against ground truth, when supplied


@dataclass
class ReconstructionRun:
    case: ParameterCase
    config: dict
    omega: float
    delta: float | None
    final: Parameter
    records: list[IterationRecord] = field(default_factory=list)
    iterates: dict[int, Parameter] = field(default_factory=dict)
    discrepancy_index: int | None = None
    best_index: int | None = None
    best: Parameter | None = None
    status: str = "running"

    @property
    def discrepancies(self) -> list[float]:
        return [record.discrepancy for record in self.records]

    @property
    def last_index(self) -> int:
        return self.records[-1].index

    def parameter_at(self, index: int | None) -> Parameter | None:
        if index is None:
            return None
        if index in self.iterates:
            return self.iterates[index]
        if index == self.last_index:
            return self.final
        if index == self.best_index:
            return self.best
        return None

    def record(self, index: int, p: Parameter, discrepancy: float, wall_time: float, store: bool,
               step: float | None = None, trials: int = 0,
               error_fn: Callable[[Parameter], float] | None = None) -> None:
        error = error_fn(p) if error_fn is not None else None
        self.records.append(IterationRecord(index, discrepancy, wall_time, step, trials, error))
        self.final = p
        if store:
            self.iterates[index] = p
        if error is not None and (self.best_index is None or error < self.records[self.best_index - 1].error):
            self.best_index = index
            self.best = p


# =============================================================================
# LANDWEBER
# =============================================================================

@dataclass
class _Trial:
    j: int
    step: float
    parameter: Parameter
    state: StateField
    observation: ObservationSeries
    discrepancy: float


def _armijo_search(p: Parameter, gradient: Parameter, disc_prev: float, omega: float,
                   y_delta: ObservationSeries, config: LandweberConfig,
                   problem: ForwardProblem, iteration: int) -> _Trial | None:
    """First accepted trial in j-order, or None when all j_max trials fail."""

    def evaluate(j: int) -> _Trial:
        step = omega * config.armijo_factor ** (j - 1)
        candidate = p.shifted(gradient, -step)
        try:
            state, y = problem.forward(candidate)
        except SolverError as exc:
            raise exc.with_iteration(iteration) from exc
        return _Trial(j, step, candidate, state, y, problem.misfit(y, y_delta))

    def accepted(trial: _Trial) -> bool:
        decrease = (disc_prev - trial.discrepancy) / disc_prev
        verbose_log(f"  iteration {iteration} trial j={trial.j}: step {trial.step:.4e}, "
                    f"discrepancy {trial.discrepancy:.6e}, relative decrease {decrease:.3e}")
        return bool(np.isfinite(trial.discrepancy)) and decrease > config.tol

    trials = range(1, config.j_max + 1)
    if config.armijo_workers <= 1:
        for j in trials:
            trial = evaluate(j)
            if accepted(trial):
                return trial
        return None

    # speculative batches; results are inspected in j-order
    with ThreadPoolExecutor(max_workers=config.armijo_workers) as pool:
        for start in range(1, config.j_max + 1, config.armijo_workers):
            batch = range(start, min(start + config.armijo_workers, config.j_max + 1))
            for trial in pool.map(evaluate, batch):
                if accepted(trial):
                    return trial
    return None


def landweber_run(y_delta: ObservationSeries, p1: Parameter, config: LandweberConfig,
                  problem: ForwardProblem, delta: float | None = None,
                  error_fn: Callable[[Parameter], float] | None = None,
                  label: str = "landweber") -> ReconstructionRun:
    """Run Landweber with Armijo step control from p1.

    Args:
        delta: Data error bound for the discrepancy principle; None defers stopping.
        error_fn: Optional ground-truth error, recorded per iteration to track the best iterate.

    Returns:
        The run with status "converged" (zero residual), "discrepancy" (stopped by the
        discrepancy principle), "stalled" (Armijo exhaustion) or "max_iterations".
    """
    config.validate()
    clock = time.perf_counter()
    try:
        state, y = problem.forward(p1)
    except SolverError as exc:
        raise exc.with_iteration(1) from exc
    disc = problem.misfit(y, y_delta)
    omega = config.omega
    if omega is None:
        omega = estimate_step_length(p1, problem, config.power_iterations, seed=config.step_seed,
                                     safety=config.step_safety, state=state)

    run = ReconstructionRun(case=p1.case, config=config.to_dict(), omega=omega, delta=delta, final=p1)
    run.record(1, p1, disc, time.perf_counter() - clock, True, error_fn=error_fn)
    threshold = config.tau * delta if delta is not None else None
    verbose_log(f"[{label}] iteration 1: discrepancy {disc:.6e}"
                + (f", threshold {threshold:.6e}" if threshold is not None else ""))

    if disc == 0.0:
        run.status = "converged"
        return run
    if threshold is not None and disc <= threshold:
        run.discrepancy_index = 1
        if not config.store_iterates:
            run.status = "discrepancy"
            return run

    p = p1
    for k in range(2, config.k_max + 1):
        clock = time.perf_counter()
        try:
            gradient = compute_gradient(p, y.minus(y_delta), state, config, problem)
        except SolverError as exc:
            raise exc.with_iteration(k) from exc
        trial = _armijo_search(p, gradient, disc, omega, y_delta, config, problem, k)
        if trial is None:
            run.status = "stalled"
            log_warning(f"[{label}] Armijo search exhausted {config.j_max} trials at iteration {k}")
            break

        p, state, y, disc = trial.parameter, trial.state, trial.observation, trial.discrepancy
        keep = config.store_iterates or (threshold is not None and run.discrepancy_index is None and disc <= threshold)
        run.record(k, p, disc, time.perf_counter() - clock, keep, step=trial.step, trials=trial.j,
                   error_fn=error_fn)
        verbose_log(f"[{label}] iteration {k}: discrepancy {disc:.6e} (j={trial.j})")

        if disc == 0.0:
            run.status = "converged"
            break
        if threshold is not None and run.discrepancy_index is None and disc <= threshold:
            run.discrepancy_index = k
            verbose_log(f"[{label}] discrepancy principle reached at iteration {k}")
            if not config.store_iterates:
                run.status = "discrepancy"
                break
    else:
        run.status = "max_iterations"

    return run


def bootstrap_run(y_delta: ObservationSeries, p1: Parameter, config: LandweberConfig,
                  problem: ForwardProblem, delta: float | None = None) -> ReconstructionRun | None:
    """Short unsmoothed run that finds a starting point for the easy-axis case.

    Returns None when config.find_initial_value is off.
    """
    if not config.find_initial_value:
        return None
    if not isinstance(p1, EasyAxis):
        raise ConfigurationError("find_initial_value", True, "the initial-value search applies to the easy-axis case")
    search = replace(config, find_initial_value=True, k_max=config.bootstrap_k_max, store_iterates=False)
    verbose_log(f"Initial-value search: up to {search.k_max} unsmoothed iterations")
    run = landweber_run(y_delta, p1, search, problem, delta=delta, label="bootstrap")
    verbose_log(f"Initial-value search finished after {run.last_index} iterations "
                f"(discrepancy {run.discrepancies[0]:.4e} -> {run.discrepancies[-1]:.4e}, status {run.status})")
    return run


def bootstrap_initial_value(y_delta: ObservationSeries, p1: Parameter, config: LandweberConfig,
                            problem: ForwardProblem, delta: float | None = None) -> Parameter:
    """p1 for the main run: the result of the initial-value search, or p1 itself when disabled."""
    run = bootstrap_run(y_delta, p1, config, problem, delta=delta)
    return p1 if run is None else run.final
