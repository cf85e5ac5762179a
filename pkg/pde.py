"""
pde.py — Implicit Euler time stepping for the forward, adjoint and sensitivity problems.

Semidiscrete forward system on a mesh with cell areas M (diagonal):

    M u' = (K + D(b(t))) u,

where K is the integrated TPFA stiffness and D(b) the central-flux drift divergence.
One implicit Euler step reads (M - dt (K + D_n)) u^n = M u^{n-1}. K and D_n both have
zero column sums, so the area-weighted mass is conserved exactly up to solver tolerance.

The adjoint is the exact transpose of the forward recursion (discretize-then-transpose),
which makes the discrete adjoint identity hold to solver tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from error_utils import ShapeError, SolverError
from fp_constants import LINEAR_SOLVE_RTOL
from geometry import DiscreteOperators, SphereMesh
from log_utils import log_warning, verbose_log
from model import DriftField, TimeGrid

# Relative undershoot tolerated before a nonnegativity warning is logged
NONNEGATIVITY_TOL = 1e-10
MASS_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class StateField:
    """Cell densities u[n, i] at t_n, in sr^-1."""
    values: np.ndarray
    time_grid: TimeGrid
    mesh: SphereMesh

    def mass(self) -> np.ndarray:
        """Area-weighted integral at every time sample."""
        return self.mesh.integrate(self.values)

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]


@dataclass(frozen=True, eq=False)
class AdjointField:
    """Adjoint psi[n, i] at t_n; psi at t_N is zero."""
    values: np.ndarray
    time_grid: TimeGrid
    mesh: SphereMesh


def uniform_density(mesh: SphereMesh) -> np.ndarray:
    return np.full(mesh.n_cells, 1.0 / mesh.total_area)


def _check_drift(b: DriftField, operators: DiscreteOperators, time_grid: TimeGrid, what: str = "drift") -> None:
    expected = (time_grid.n_samples, operators.mesh.n_cells, 3)
    if b.values.shape != expected:
        raise ShapeError(what, expected, b.values.shape)


def _base_matrix(operators: DiscreteOperators, dt: float) -> sp.csr_matrix:
    return (sp.diags(operators.mass) - dt * operators.stiffness).tocsr()


def _solve_step(system: sp.spmatrix, rhs: np.ndarray, stage: str, step: int) -> np.ndarray:
    """Sparse direct solve with a relative residual check."""
    system = system.tocsc()
    try:
        solution = spla.spsolve(system, rhs)
    except (RuntimeError, ValueError) as exc:
        raise SolverError(stage, step, str(exc)) from exc
    if not np.all(np.isfinite(solution)):
        raise SolverError(stage, step, "non-finite solution (singular system)")
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    residual = np.linalg.norm(system @ solution - rhs) / scale
    if residual > LINEAR_SOLVE_RTOL:
        raise SolverError(stage, step, f"relative residual {residual:.2e}")
    return solution


def solve_forward(b: DriftField, u0: np.ndarray, operators: DiscreteOperators, time_grid: TimeGrid) -> StateField:
    """Integrate u' = div(lambda grad u + b u) from u(0) = u0.

    Raises:
        ShapeError: b or u0 do not match mesh and grid.
        SolverError: a step's linear system could not be solved; carries the step index.
    """
    mesh = operators.mesh
    u0 = mesh.check_cell_field(u0, "initial density")
    if u0.ndim != 1:
        raise ShapeError("initial density", (mesh.n_cells,), u0.shape)
    _check_drift(b, operators, time_grid)

    dt = time_grid.dt
    base = _base_matrix(operators, dt)
    flux = operators.flux_assembly
    values = np.empty((time_grid.n_samples, mesh.n_cells))
    values[0] = u0
    for n in range(1, time_grid.n_samples):
        system = base - dt * flux.matrix(b.at(n))
        values[n] = _solve_step(system, operators.mass * values[n - 1], "forward", n)

    state = StateField(values=values, time_grid=time_grid, mesh=mesh)
    _report_state_checks(state, u0)
    return state


def _report_state_checks(state: StateField, u0: np.ndarray) -> None:
    mass = state.mass()
    drift = np.max(np.abs(mass - mass[0])) / max(abs(mass[0]), np.finfo(float).tiny)
    if drift > MASS_TOL:
        log_warning(f"Forward solve mass drifted by {drift:.2e} (relative)")
    if np.all(u0 >= 0):
        lowest = float(state.values.min())
        peak = float(np.abs(state.values).max())
        if lowest < -NONNEGATIVITY_TOL * peak:
            step = int(np.unravel_index(np.argmin(state.values), state.values.shape)[0])
            log_warning(f"Density undershoot {lowest:.3e} at step {step} (peak {peak:.3e})")
    verbose_log(f"Forward solve: {state.time_grid.describe()}, {state.mesh.n_cells} cells, "
                f"mass {mass[-1]:.12f}")


def solve_adjoint(b: DriftField, source: np.ndarray, operators: DiscreteOperators, time_grid: TimeGrid) -> AdjointField:
    """Backward sweep of the transposed forward recursion.

    psi(t_N) = 0 and, for n = N-1..0,

        (M - dt (K + D_{n+1})^T) psi_n = M psi_{n+1} + w_{n+1} M source_{n+1},

    with w the trapezoid weights. This is the implicit Euler discretization of
    -psi' = lambda Lap psi + D(b)^T psi + source on the reversed grid.

    Args:
        source: Pointwise forcing G*z, shape (n_samples, n_cells).
    """
    mesh = operators.mesh
    source = np.asarray(source, dtype=float)
    expected = (time_grid.n_samples, mesh.n_cells)
    if source.shape != expected:
        raise ShapeError("adjoint source", expected, source.shape)
    _check_drift(b, operators, time_grid)

    dt = time_grid.dt
    weights = time_grid.weights
    base = _base_matrix(operators, dt)
    flux = operators.flux_assembly
    values = np.zeros(expected)
    for n in range(time_grid.n_steps - 1, -1, -1):
        step = n + 1
        system = base - dt * flux.matrix(b.at(step)).T
        rhs = operators.mass * (values[n + 1] + weights[step] * source[step])
        values[n] = _solve_step(system, rhs, "adjoint", step)
    return AdjointField(values=values, time_grid=time_grid, mesh=mesh)


def solve_sensitivity(b: DriftField, h: DriftField, u: StateField, operators: DiscreteOperators,
                      time_grid: TimeGrid) -> StateField:
    """Linearization v = S'(b) h of the discrete forward map at the state u = S(b).

    (M - dt (K + D_n)) v^n = M v^{n-1} + dt D(h_n) u^n, v^0 = 0.
    """
    _check_drift(b, operators, time_grid)
    _check_drift(h, operators, time_grid, "drift increment")
    mesh = operators.mesh
    dt = time_grid.dt
    base = _base_matrix(operators, dt)
    flux = operators.flux_assembly
    values = np.zeros((time_grid.n_samples, mesh.n_cells))
    for n in range(1, time_grid.n_samples):
        system = base - dt * flux.matrix(b.at(n))
        rhs = operators.mass * values[n - 1] + dt * flux.apply(h.at(n), u.values[n])
        values[n] = _solve_step(system, rhs, "sensitivity", n)
    return StateField(values=values, time_grid=time_grid, mesh=mesh)


def state_adjoint_product(u: StateField, psi: AdjointField, operators: DiscreteOperators) -> np.ndarray:
    """Discrete u grad(psi) cofield paired with the drift flux.

    Returns W of shape (n_samples, n_cells, 3) such that for every drift increment h

        sum_n dt psi_{n-1}^T D(h_n) u^n == drift_inner(h, W),

    i.e. the right-hand side of the adjoint identity <G S'(b) h, z> = <h, W>.
    W vanishes at t_0, where the drift never enters the recursion.
    """
    grid = u.time_grid
    weights = grid.weights
    flux = operators.flux_assembly
    mass = operators.mass
    out = np.zeros((grid.n_samples, operators.mesh.n_cells, 3))
    for n in range(1, grid.n_samples):
        scale = grid.dt / weights[n]
        out[n] = scale * flux.pair(u.values[n], psi.values[n - 1]) / mass[:, None]
    return out


def write_state_csv(path: Path, state: StateField) -> None:
    """Per-step dump of a state: columns t, u1..uN."""
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "t," + ",".join(f"u{i + 1}" for i in range(state.mesh.n_cells))
    table = np.column_stack([state.time_grid.times, state.values])
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")
