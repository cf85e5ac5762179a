"""
model.py — Physical parameters, the drift field and the parameter-map derivatives.

The drift of the Néel Fokker-Planck equation is

    b(m, t) = a1 (m x B) x m + alpha2 (m x phi(m, t)) x m,

with B the applied field in tesla (mu0 * H_app) and a1 = alpha1 / mu0. Three quantities
can be identified from data: the field waveform B(t) (case 1), an anisotropy landscape
phi(m[, t]) (case 2) and a time-dependent easy axis n(t) with phi = (m.n) n (case 3).

(m x v) x m = v - (m.v) m is the tangential projection P(m) v, which is symmetric; every
derivative and adjoint below is written in terms of it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import ClassVar, Union

import numpy as np

from error_utils import ConfigurationError, ShapeError
from fp_constants import (
    ANISOTROPY_CONSTANT,
    DAMPING,
    DIFFUSION,
    GYROMAGNETIC_RATIO,
    SATURATION_MAGNETIZATION,
    VACUUM_PERMEABILITY,
)
from geometry import SphereMesh


# =============================================================================
# TIME GRID
# =============================================================================

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_n = n * dt, n = 0..n_steps, with trapezoid quadrature weights."""
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.t_end) or self.t_end <= 0:
            raise ConfigurationError("t_end", self.t_end, "time horizon must be positive")
        if isinstance(self.n_steps, bool) or int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError("n_steps", self.n_steps, "need at least one time step")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @property
    def n_samples(self) -> int:
        return self.n_steps + 1

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.n_samples)

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.n_samples, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w

    def integrate(self, series: np.ndarray) -> float:
        """Trapezoid integral of a (n_samples, ...) series, summed over trailing axes."""
        series = np.asarray(series, dtype=float)
        return float(self.weights @ series.reshape(self.n_samples, -1).sum(axis=1))

    def describe(self) -> str:
        return f"T={self.t_end:.6g}s, {self.n_steps} steps"


# =============================================================================
# PHYSICAL CONSTANTS
# =============================================================================

@dataclass(frozen=True)
class PhysicalConstants:
    gamma: float = GYROMAGNETIC_RATIO
    alpha_hat: float = DAMPING
    mu0: float = VACUUM_PERMEABILITY
    K_anis: float = ANISOTROPY_CONSTANT
    M_S: float = SATURATION_MAGNETIZATION
    lam: float = DIFFUSION

    def __post_init__(self):
        for key in ("gamma", "alpha_hat", "mu0", "M_S", "lam"):
            value = getattr(self, key)
            if not np.isfinite(value) or value <= 0:
                raise ConfigurationError(key, value, "must be positive")
        if not np.isfinite(self.K_anis) or self.K_anis < 0:
            raise ConfigurationError("K_anis", self.K_anis, "must be non-negative")

    @property
    def gamma_tilde(self) -> float:
        return self.gamma / (1.0 + self.alpha_hat ** 2)

    @property
    def alpha1(self) -> float:
        return self.gamma_tilde * self.alpha_hat * self.mu0

    @property
    def alpha2(self) -> float:
        return 2.0 * self.gamma_tilde * self.alpha_hat * self.K_anis / self.M_S

    @property
    def field_rate(self) -> float:
        """Drift rate per tesla of applied field: alpha1 / mu0 (s^-1 T^-1)."""
        return self.alpha1 / self.mu0

    def to_dict(self) -> dict[str, float]:
        return {"gamma": self.gamma, "alpha_hat": self.alpha_hat, "mu0": self.mu0,
                "K_anis": self.K_anis, "M_S": self.M_S, "lam": self.lam}


# =============================================================================
# PARAMETERS
# =============================================================================

class ParameterCase(IntEnum):
    FIELD_WAVEFORM = 1
    ANISOTROPY_LANDSCAPE = 2
    EASY_AXIS = 3


@dataclass(frozen=True, eq=False)
class _ParameterBase:
    values: np.ndarray
    case: ClassVar[ParameterCase]

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim < 2 or values.shape[-1] != 3:
            raise ShapeError(f"{type(self).__name__} values", "(..., 3)", values.shape)
        object.__setattr__(self, "values", values)

    def with_values(self, values: np.ndarray):
        return replace(self, values=values)

    def zeros_like(self):
        return self.with_values(np.zeros_like(self.values))

    def shifted(self, direction: "Parameter", scale: float):
        """Return self + scale * direction."""
        _check_same_case(self, direction)
        return self.with_values(self.values + scale * direction.values)

    def scaled(self, factor: float):
        return self.with_values(factor * self.values)


@dataclass(frozen=True, eq=False)
class FieldWaveform(_ParameterBase):
    """Applied field B(t) in tesla, shape (n_samples, 3)."""
    case: ClassVar[ParameterCase] = ParameterCase.FIELD_WAVEFORM


@dataclass(frozen=True, eq=False)
class AnisotropyLandscape(_ParameterBase):
    """phi per cell, shape (n_cells, 3), or (n_samples, n_cells, 3) when time-dependent."""
    case: ClassVar[ParameterCase] = ParameterCase.ANISOTROPY_LANDSCAPE

    @property
    def time_dependent(self) -> bool:
        return self.values.ndim == 3


@dataclass(frozen=True, eq=False)
class EasyAxis(_ParameterBase):
    """Easy-axis trajectory n(t), shape (n_samples, 3); not constrained to unit length."""
    case: ClassVar[ParameterCase] = ParameterCase.EASY_AXIS

    def normalized(self) -> "EasyAxis":
        norms = np.linalg.norm(self.values, axis=1, keepdims=True)
        return self.with_values(self.values / np.where(norms > 0, norms, 1.0))


Parameter = Union[FieldWaveform, AnisotropyLandscape, EasyAxis]

PARAMETER_TYPES: dict[ParameterCase, type] = {
    ParameterCase.FIELD_WAVEFORM: FieldWaveform,
    ParameterCase.ANISOTROPY_LANDSCAPE: AnisotropyLandscape,
    ParameterCase.EASY_AXIS: EasyAxis,
}


def _check_same_case(p: Parameter, q: Parameter) -> None:
    if type(p) is not type(q):
        raise ShapeError("parameter case", type(p).__name__, type(q).__name__)
    if p.values.shape != q.values.shape:
        raise ShapeError(f"{type(p).__name__} increment", p.values.shape, q.values.shape)


def check_parameter(p: Parameter, mesh: SphereMesh, time_grid: TimeGrid) -> None:
    """Raise ShapeError unless p matches the mesh and the time grid."""
    n_t, n_c = time_grid.n_samples, mesh.n_cells
    if isinstance(p, AnisotropyLandscape):
        expected = (n_t, n_c, 3) if p.time_dependent else (n_c, 3)
    else:
        expected = (n_t, 3)
    if p.values.shape != expected:
        raise ShapeError(f"{type(p).__name__} values", expected, p.values.shape)


def parameter_inner(p: Parameter, q: Parameter, mesh: SphereMesh, time_grid: TimeGrid) -> float:
    """Discrete L2 inner product of the parameter space (trapezoid in time, area in space)."""
    _check_same_case(p, q)
    products = np.einsum("...j,...j->...", p.values, q.values)
    if isinstance(p, AnisotropyLandscape):
        spatial = products @ mesh.cell_areas
        return float(time_grid.weights @ spatial) if p.time_dependent else float(spatial)
    return float(time_grid.weights @ products)


def parameter_norm(p: Parameter, mesh: SphereMesh, time_grid: TimeGrid) -> float:
    return float(np.sqrt(max(parameter_inner(p, p, mesh, time_grid), 0.0)))


# =============================================================================
# DRIFT
# =============================================================================

@dataclass(frozen=True, eq=False)
class DriftField:
    """Drift per time sample and cell, shape (n_samples, n_cells, 3), in s^-1."""
    values: np.ndarray

    def at(self, step: int) -> np.ndarray:
        return self.values[step]

    @classmethod
    def zeros(cls, mesh: SphereMesh, time_grid: TimeGrid) -> "DriftField":
        return cls(np.zeros((time_grid.n_samples, mesh.n_cells, 3)))


def drift_inner(a: np.ndarray, b: np.ndarray, mesh: SphereMesh, time_grid: TimeGrid) -> float:
    """Area-and-time-weighted inner product of two (n_samples, n_cells, 3) fields."""
    products = np.einsum("nij,nij->ni", a, b)
    return float(time_grid.weights @ (products @ mesh.cell_areas))


def _tangential(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """P(m) v = (m x v) x m, broadcast over leading axes of v."""
    return v - np.sum(v * m, axis=-1, keepdims=True) * m


def _landscape_series(phi: AnisotropyLandscape, n_samples: int) -> np.ndarray:
    if phi.time_dependent:
        return phi.values
    return np.broadcast_to(phi.values, (n_samples,) + phi.values.shape)


def _field_term(background: FieldWaveform | None, constants: PhysicalConstants,
                mesh: SphereMesh, time_grid: TimeGrid) -> np.ndarray | float:
    if background is None:
        return 0.0
    check_parameter(background, mesh, time_grid)
    return constants.field_rate * _tangential(mesh.circumcenters, background.values[:, None, :])


def assemble_drift(p: Parameter, constants: PhysicalConstants, mesh: SphereMesh,
                   time_grid: TimeGrid, background: FieldWaveform | None = None) -> DriftField:
    """Evaluate b(m, t; p) at every circumcenter and time sample.

    Args:
        p: The parameter being identified.
        background: Applied field used by cases 2 and 3; ignored in case 1.

    Raises:
        ShapeError: p or background do not match the mesh and time grid.
    """
    check_parameter(p, mesh, time_grid)
    m = mesh.circumcenters
    n_samples = time_grid.n_samples

    if isinstance(p, FieldWaveform):
        values = constants.field_rate * _tangential(m, p.values[:, None, :])
    elif isinstance(p, AnisotropyLandscape):
        phi = _landscape_series(p, n_samples)
        values = constants.alpha2 * _tangential(m, phi) + _field_term(background, constants, mesh, time_grid)
    else:
        projection = p.values @ m.T  # (n_samples, n_cells): m . n(t)
        phi = projection[..., None] * p.values[:, None, :]
        values = constants.alpha2 * _tangential(m, phi) + _field_term(background, constants, mesh, time_grid)

    return DriftField(np.broadcast_to(values, (n_samples, mesh.n_cells, 3)).copy())


def gamma_derivative_apply(p: Parameter, direction: Parameter, constants: PhysicalConstants,
                           mesh: SphereMesh, time_grid: TimeGrid) -> DriftField:
    """Directional derivative Γ'(p) h of the parameter-to-drift map."""
    _check_same_case(p, direction)
    check_parameter(direction, mesh, time_grid)
    m = mesh.circumcenters
    n_samples = time_grid.n_samples
    h = direction.values

    if isinstance(p, FieldWaveform):
        values = constants.field_rate * _tangential(m, h[:, None, :])
    elif isinstance(p, AnisotropyLandscape):
        values = constants.alpha2 * _tangential(m, _landscape_series(direction, n_samples))
    else:
        n = p.values
        # product rule of (m.n) n: (m.h) n + (m.n) h
        m_dot_h = h @ m.T
        m_dot_n = n @ m.T
        increment = m_dot_h[..., None] * n[:, None, :] + m_dot_n[..., None] * h[:, None, :]
        values = constants.alpha2 * _tangential(m, increment)

    return DriftField(np.broadcast_to(values, (n_samples, mesh.n_cells, 3)).copy())


def gamma_adjoint_apply(p: Parameter, w: np.ndarray, constants: PhysicalConstants,
                        mesh: SphereMesh, time_grid: TimeGrid) -> Parameter:
    """Adjoint Γ'(p)* of gamma_derivative_apply.

    Satisfies drift_inner(Γ'(p) h, w) == parameter_inner(h, Γ'(p)* w) for every h.

    Args:
        w: Cofield of shape (n_samples, n_cells, 3).
    """
    w = np.asarray(w, dtype=float)
    expected = (time_grid.n_samples, mesh.n_cells, 3)
    if w.shape != expected:
        raise ShapeError("drift cofield", expected, w.shape)
    check_parameter(p, mesh, time_grid)
    m = mesh.circumcenters
    areas = mesh.cell_areas
    projected = _tangential(m, w)

    if isinstance(p, FieldWaveform):
        return p.with_values(constants.field_rate * np.einsum("nij,i->nj", projected, areas))
    if isinstance(p, AnisotropyLandscape):
        if p.time_dependent:
            return p.with_values(constants.alpha2 * projected)
        return p.with_values(constants.alpha2 * np.einsum("n,nij->ij", time_grid.weights, projected))

    n = p.values
    n_dot_pw = np.einsum("nj,nij->ni", n, projected)
    m_dot_n = n @ m.T
    per_cell = n_dot_pw[..., None] * m + m_dot_n[..., None] * projected
    return p.with_values(constants.alpha2 * np.einsum("nij,i->nj", per_cell, areas))


# =============================================================================
# SERIALIZATION
# =============================================================================

def write_parameter(path: Path, p: Parameter, time_grid: TimeGrid) -> None:
    """Write a parameter as delimited text with full float precision."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(p, AnisotropyLandscape) and p.time_dependent:
        n_t, n_c, _ = p.values.shape
        table = np.column_stack([
            np.repeat(time_grid.times, n_c),
            np.tile(np.arange(n_c), n_t),
            p.values.reshape(-1, 3),
        ])
        header = "t,cell,p1,p2,p3"
    elif isinstance(p, AnisotropyLandscape):
        table = np.column_stack([np.arange(len(p.values)), p.values])
        header = "cell,p1,p2,p3"
    else:
        table = np.column_stack([time_grid.times, p.values])
        header = "t,p1,p2,p3"
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")


def read_parameter(path: Path, case: ParameterCase) -> Parameter:
    """Read a parameter written by write_parameter; the layout is taken from the header."""
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().strip()
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    cls = PARAMETER_TYPES[ParameterCase(case)]
    if header == "t,cell,p1,p2,p3":
        n_c = int(table[:, 1].max()) + 1
        return cls(table[:, 2:].reshape(-1, n_c, 3))
    if header in ("t,p1,p2,p3", "cell,p1,p2,p3"):
        return cls(table[:, 1:])
    raise ConfigurationError("parameter file", str(path), f"unrecognized header {header!r}")
