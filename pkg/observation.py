"""
observation.py — Observation operator G, its adjoint and the measurement file format.

Expectation mode observes the mean magnetic moment Gu(t) = sum_i a_i m_i u_i(t)
(midpoint rule at the circumcenters). Identity mode observes the full density.
The data space Y carries the trapezoid-in-time inner product, area-weighted in identity
mode, so <Gu, z>_Y == <u, G*z> with the area-and-time-weighted state inner product.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from error_utils import ConfigurationError, GridMismatchError, ShapeError
from geometry import SphereMesh
from model import TimeGrid
from pde import StateField


class ObservationMode(Enum):
    EXPECTATION = "expectation"
    IDENTITY = "identity"


@dataclass(frozen=True, eq=False)
class ObservationSeries:
    values: np.ndarray   # (n_samples, 3) or (n_samples, n_cells)
    mode: ObservationMode
    time_grid: TimeGrid

    def with_values(self, values: np.ndarray) -> "ObservationSeries":
        return replace(self, values=values)

    def minus(self, other: "ObservationSeries") -> "ObservationSeries":
        if other.mode is not self.mode or other.values.shape != self.values.shape:
            raise ShapeError("observation", self.values.shape, other.values.shape)
        return self.with_values(self.values - other.values)


def observe(u: StateField, mode: ObservationMode, gain: float = 1.0) -> ObservationSeries:
    """Apply G to every time sample of u."""
    if mode is ObservationMode.IDENTITY:
        values = u.values.copy() if gain == 1.0 else gain * u.values
    else:
        values = gain * ((u.values * u.mesh.cell_areas) @ u.mesh.circumcenters)
    return ObservationSeries(values=values, mode=mode, time_grid=u.time_grid)


def observe_adjoint(z: ObservationSeries, mesh: SphereMesh, gain: float = 1.0) -> np.ndarray:
    """G*z as a pointwise cell field per time sample, shape (n_samples, n_cells)."""
    n_samples = z.time_grid.n_samples
    if z.mode is ObservationMode.IDENTITY:
        if z.values.shape != (n_samples, mesh.n_cells):
            raise ShapeError("identity observation", (n_samples, mesh.n_cells), z.values.shape)
        return z.values.copy() if gain == 1.0 else gain * z.values
    if z.values.shape != (n_samples, 3):
        raise ShapeError("expectation observation", (n_samples, 3), z.values.shape)
    return gain * (z.values @ mesh.circumcenters.T)


def observation_inner(y: ObservationSeries, z: ObservationSeries, mesh: SphereMesh) -> float:
    """Inner product of the data space Y."""
    if y.mode is not z.mode or y.values.shape != z.values.shape:
        raise ShapeError("observation", y.values.shape, z.values.shape)
    if y.mode is ObservationMode.IDENTITY:
        products = (y.values * z.values) @ mesh.cell_areas
    else:
        products = np.einsum("nj,nj->n", y.values, z.values)
    return float(y.time_grid.weights @ products)


def observation_norm(y: ObservationSeries, mesh: SphereMesh) -> float:
    return float(np.sqrt(max(observation_inner(y, y, mesh), 0.0)))


def state_inner(u: np.ndarray, v: np.ndarray, mesh: SphereMesh, time_grid: TimeGrid) -> float:
    """Area-and-time-weighted inner product of two (n_samples, n_cells) fields."""
    return float(time_grid.weights @ ((np.asarray(u) * np.asarray(v)) @ mesh.cell_areas))


# =============================================================================
# FILE FORMAT
# =============================================================================

def write_observation_csv(path: Path, series: ObservationSeries) -> None:
    """Write `t,y1,y2,y3` (expectation) or `t,u1..uN` (identity) with round-trip precision."""
    path.parent.mkdir(parents=True, exist_ok=True)
    prefix = "u" if series.mode is ObservationMode.IDENTITY else "y"
    columns = series.values.shape[1]
    header = "t," + ",".join(f"{prefix}{k + 1}" for k in range(columns))
    table = np.column_stack([series.time_grid.times, series.values])
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")


def read_observation_csv(path: Path, time_grid: TimeGrid) -> ObservationSeries:
    """Read a measurement file and check it lies on `time_grid`.

    Raises:
        GridMismatchError: sample count or sample times differ from the grid.
        ConfigurationError: the header is not a recognised observation header.
    """
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().strip().split(",")
    if not header or header[0] != "t" or len(header) < 2:
        raise ConfigurationError("measurement", str(path), "header must start with 't,'")
    mode = ObservationMode.IDENTITY if header[1].startswith("u") else ObservationMode.EXPECTATION
    if mode is ObservationMode.EXPECTATION and header != ["t", "y1", "y2", "y3"]:
        raise ConfigurationError("measurement", str(path), "expected header t,y1,y2,y3")

    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    times = table[:, 0]
    if len(times) != time_grid.n_samples or not np.allclose(times, time_grid.times, rtol=0.0,
                                                             atol=1e-9 * time_grid.t_end):
        raise GridMismatchError(time_grid.describe(), f"{len(times)} samples up to t={times[-1]:.6g}s")
    return ObservationSeries(values=table[:, 1:], mode=mode, time_grid=time_grid)
