"""
geometry.py — Triangulated unit sphere and its finite-volume operators.

Builds refined icosahedral meshes (20·4^level triangles), the dual quantities needed by a
cell-centred finite-volume scheme (circumcenters, spherical cell areas, edge lengths,
circumcenter distances and conormals), the two-point-flux diffusion stiffness, the
central-flux drift assembly and a conservative mesh-to-mesh transfer.

One unknown per triangle, collocated at the triangle's circumcenter. All distances are
geodesic (great-circle) distances on the unit sphere.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from error_utils import ConfigurationError, InterpolationError, MeshQualityError, ShapeError
from log_utils import verbose_log
from version import MESH_FORMAT


# =============================================================================
# CONSTANTS
# =============================================================================

MIN_LEVEL = 0
MAX_LEVEL = 7
MIN_CELL_AREA = 1e-14

# Each level is rotated by LEVEL_ROTATION_ANGLE * level about this axis. Plain midpoint
# refinement reproduces the icosahedral face centers at every level; the rotation keeps
# the circumcenters of consecutive levels apart.
LEVEL_ROTATION_AXIS = np.array([1.0, 2.0, 3.0]) / np.sqrt(14.0)
LEVEL_ROTATION_ANGLE = 0.1  # rad

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0

_ICOSAHEDRON_FACES = np.array([
    # 5 faces around vertex 0
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    # 5 adjacent faces
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    # 5 faces around vertex 3
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    # 5 adjacent faces
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


# =============================================================================
# MESH TYPES
# =============================================================================

@dataclass(frozen=True, eq=False)
class EdgeSet:
    """Interior edges of a closed triangulation, one row per edge.

    Each edge separates a left cell and a right cell. The conormal is the unit tangent
    vector at the edge midpoint, orthogonal to the edge, pointing from left to right.
    """
    left: np.ndarray        # (E,) cell index
    right: np.ndarray       # (E,) cell index
    vertices: np.ndarray    # (E, 2) sorted vertex pair
    length: np.ndarray      # (E,) arc length of the shared edge
    distance: np.ndarray    # (E,) geodesic distance between the two circumcenters
    conormal: np.ndarray    # (E, 3)
    tangent: np.ndarray     # (E, 3) unit tangent along the edge

    @property
    def count(self) -> int:
        return len(self.left)


@dataclass(frozen=True, eq=False)
class SphereMesh:
    vertices: np.ndarray       # (V, 3) unit vectors
    triangles: np.ndarray      # (T, 3) outward-oriented index triples
    circumcenters: np.ndarray  # (T, 3) unit vectors
    cell_areas: np.ndarray     # (T,) steradian
    edges: EdgeSet
    refinement_level: int

    @property
    def n_cells(self) -> int:
        return len(self.triangles)

    @property
    def diameter(self) -> float:
        """Mesh size h: the longest edge arc length."""
        return float(self.edges.length.max())

    @property
    def total_area(self) -> float:
        return float(self.cell_areas.sum())

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Area-weighted sum over the last (cell) axis."""
        return np.asarray(values) @ self.cell_areas

    def check_cell_field(self, values: np.ndarray, what: str = "cell field") -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.n_cells:
            raise ShapeError(what, f"(..., {self.n_cells})", values.shape)
        return values


# =============================================================================
# CONSTRUCTION
# =============================================================================

def _normalize(vectors: np.ndarray) -> np.ndarray:
    return vectors / np.linalg.norm(vectors, axis=-1, keepdims=True)


def _arc_length(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # atan2 form stays accurate for the short arcs of fine meshes
    return np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), np.einsum("ij,ij->i", a, b))


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    t = GOLDEN_RATIO
    vertices = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    vertices = _normalize(vertices)
    triangles = _ICOSAHEDRON_FACES.copy()
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    inward = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    triangles[inward] = triangles[inward][:, [0, 2, 1]]
    return vertices, triangles


def _subdivide(vertices: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split every triangle into four through its projected edge midpoints."""
    n_tri = len(triangles)
    half_edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    unique, inverse = np.unique(np.sort(half_edges, axis=1), axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)

    midpoints = _normalize(vertices[unique[:, 0]] + vertices[unique[:, 1]])
    offset = len(vertices)
    ab = offset + inverse[:n_tri]
    bc = offset + inverse[n_tri:2 * n_tri]
    ca = offset + inverse[2 * n_tri:]
    a, b, c = triangles.T

    children = np.concatenate([
        np.stack([a, ab, ca], axis=1),
        np.stack([ab, b, bc], axis=1),
        np.stack([ca, bc, c], axis=1),
        np.stack([ab, bc, ca], axis=1),
    ])
    return np.vstack([vertices, midpoints]), children


def _build_edges(vertices: np.ndarray, triangles: np.ndarray, circumcenters: np.ndarray) -> EdgeSet:
    n_tri = len(triangles)
    half_edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    owner = np.tile(np.arange(n_tri), 3)
    keys, inverse, counts = np.unique(
        np.sort(half_edges, axis=1), axis=0, return_inverse=True, return_counts=True,
    )
    inverse = np.asarray(inverse).reshape(-1)
    if np.any(counts != 2):
        raise MeshQualityError(f"{int(np.sum(counts != 2))} edge(s) not shared by exactly two triangles")

    order = np.argsort(inverse, kind="stable")
    pairs = owner[order].reshape(-1, 2)
    left, right = pairs[:, 0], pairs[:, 1]

    v0, v1 = vertices[keys[:, 0]], vertices[keys[:, 1]]
    midpoint = _normalize(v0 + v1)
    chord = v1 - v0
    tangent = _normalize(chord - np.einsum("ij,ij->i", chord, midpoint)[:, None] * midpoint)
    conormal = _normalize(np.cross(tangent, midpoint))
    flip = np.einsum("ij,ij->i", conormal, circumcenters[right] - circumcenters[left]) < 0
    conormal[flip] *= -1.0

    return EdgeSet(
        left=left,
        right=right,
        vertices=keys,
        length=_arc_length(v0, v1),
        distance=_arc_length(circumcenters[left], circumcenters[right]),
        conormal=conormal,
        tangent=tangent,
    )


def mesh_from_triangulation(vertices: np.ndarray, triangles: np.ndarray, level: int) -> SphereMesh:
    """Compute the dual geometry of an outward-oriented triangulation of the unit sphere.

    Vertices are used as given, so a mesh rebuilt from cached vertices is bit-identical
    to the one that was saved.
    """
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    a, b, c = (vertices[triangles[:, k]] for k in range(3))

    normal = np.cross(b - a, c - a)
    circumcenters = _normalize(normal)

    # spherical excess: tan(E/2) = |a.(b x c)| / (1 + a.b + b.c + c.a)
    triple = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    denominator = 1.0 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    cell_areas = 2.0 * np.arctan2(triple, denominator)

    edges = _build_edges(vertices, triangles, circumcenters)
    return SphereMesh(
        vertices=vertices,
        triangles=triangles,
        circumcenters=circumcenters,
        cell_areas=cell_areas,
        edges=edges,
        refinement_level=int(level),
    )


def validate_level(level: object) -> int:
    if isinstance(level, bool) or not isinstance(level, (int, np.integer)):
        raise ConfigurationError("level", level, "refinement level must be an integer")
    if not MIN_LEVEL <= level <= MAX_LEVEL:
        raise ConfigurationError("level", level, f"refinement level must lie in [{MIN_LEVEL}, {MAX_LEVEL}]")
    return int(level)


def build_icosphere(level: int) -> SphereMesh:
    """Build the level-`level` icosphere with 20·4^level triangles.

    Raises:
        ConfigurationError: level outside [0, 7].
    """
    level = validate_level(level)
    vertices, triangles = _icosahedron()
    for _ in range(level):
        vertices, triangles = _subdivide(vertices, triangles)

    rotation = Rotation.from_rotvec(LEVEL_ROTATION_ANGLE * level * LEVEL_ROTATION_AXIS)
    mesh = mesh_from_triangulation(_normalize(rotation.apply(vertices)), triangles, level)
    verbose_log(f"Built icosphere level {level}: {mesh.n_cells} triangles, h = {mesh.diameter:.4f}")
    return mesh


def min_circumcenter_distance(mesh_a: SphereMesh, mesh_b: SphereMesh) -> float:
    """Smallest Euclidean distance between the circumcenter sets of two meshes."""
    distances, _ = cKDTree(mesh_b.circumcenters).query(mesh_a.circumcenters)
    return float(distances.min())


# =============================================================================
# MESH CACHE
# =============================================================================

def mesh_cache_dir() -> Path:
    configured = os.getenv("FOKKERID_CACHE_DIR")
    return Path(configured) if configured else Path.home() / ".cache" / "fokkerid"


def mesh_cache_path(level: int, cache_dir: Path | None = None) -> Path:
    return (cache_dir or mesh_cache_dir()) / f"icosphere_L{level}.npz"


def save_mesh(mesh: SphereMesh, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        np.savez(
            handle,
            header=np.array(MESH_FORMAT),
            level=np.array(mesh.refinement_level),
            vertices=mesh.vertices,
            triangles=mesh.triangles,
        )


def load_mesh(path: Path) -> SphereMesh:
    """Load a cached mesh, rejecting files written with another format header."""
    with np.load(path, allow_pickle=False) as data:
        header = str(data["header"])
        if header != MESH_FORMAT:
            raise MeshQualityError(f"cache file {path} has header {header!r}, expected {MESH_FORMAT!r}")
        return mesh_from_triangulation(data["vertices"], data["triangles"], int(data["level"]))


def load_or_build_mesh(level: int, cache_dir: Path | None = None) -> tuple[SphereMesh, bool]:
    """Return (mesh, cache_hit). A cache miss builds the mesh and writes the cache file."""
    level = validate_level(level)
    path = mesh_cache_path(level, cache_dir)
    if path.exists():
        verbose_log(f"Mesh cache hit: {path}")
        return load_mesh(path), True
    mesh = build_icosphere(level)
    save_mesh(mesh, path)
    verbose_log(f"Mesh cache written: {path}")
    return mesh, False


# =============================================================================
# DISCRETE OPERATORS
# =============================================================================

@dataclass(frozen=True, eq=False)
class DriftFluxAssembly:
    """Per-edge geometry for the central-flux drift divergence.

    For a cell-wise drift b, the flux through edge e from left to right is
    g_e * (u_L + u_R) / 2 with g_e = |e| * nu_e . (b_L + b_R) / 2. The assembled matrix
    D(b) has zero column sums, so the area-weighted sum of D(b) u vanishes for every u.
    """
    left: np.ndarray
    right: np.ndarray
    length: np.ndarray
    conormal: np.ndarray
    n_cells: int

    def edge_flux(self, drift: np.ndarray) -> np.ndarray:
        mean = 0.5 * (drift[self.left] + drift[self.right])
        return self.length * np.einsum("ej,ej->e", self.conormal, mean)

    def matrix(self, drift: np.ndarray) -> sp.csr_matrix:
        half = 0.5 * self.edge_flux(drift)
        rows = np.concatenate([self.left, self.left, self.right, self.right])
        cols = np.concatenate([self.left, self.right, self.left, self.right])
        data = np.concatenate([half, half, -half, -half])
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n_cells, self.n_cells))

    def apply(self, drift: np.ndarray, u: np.ndarray) -> np.ndarray:
        """D(drift) u without forming the matrix."""
        flux = self.edge_flux(drift) * 0.5 * (u[self.left] + u[self.right])
        return (np.bincount(self.left, weights=flux, minlength=self.n_cells)
                - np.bincount(self.right, weights=flux, minlength=self.n_cells))

    def pair(self, u: np.ndarray, psi: np.ndarray) -> np.ndarray:
        """Gradient of psi^T D(drift) u with respect to the cell drift vectors.

        D is linear in the drift, so the result is the exact cofield c with
        psi^T D(h) u = sum_i h_i . c_i for every increment h.
        """
        coeff = 0.25 * self.length * (u[self.left] + u[self.right]) * (psi[self.left] - psi[self.right])
        contribution = coeff[:, None] * self.conormal
        out = np.empty((self.n_cells, 3))
        for k in range(3):
            out[:, k] = (np.bincount(self.left, weights=contribution[:, k], minlength=self.n_cells)
                         + np.bincount(self.right, weights=contribution[:, k], minlength=self.n_cells))
        return out


@dataclass(frozen=True, eq=False)
class DiscreteOperators:
    """Finite-volume operators on one mesh.

    `laplacian` is the integrated (area-multiplied) Laplace–Beltrami operator: symmetric,
    negative semidefinite, zero row sums. `stiffness` is diffusion * laplacian. The
    pointwise operator is laplacian / mass.
    """
    mesh: SphereMesh
    diffusion: float
    laplacian: sp.csr_matrix
    stiffness: sp.csr_matrix
    flux_assembly: DriftFluxAssembly
    mass: np.ndarray

    def laplace_beltrami(self, u: np.ndarray) -> np.ndarray:
        return (self.laplacian @ u) / self.mass if u.ndim == 1 else (self.laplacian @ u) / self.mass[:, None]


def assemble_operators(mesh: SphereMesh, lam: float) -> DiscreteOperators:
    """Assemble the TPFA stiffness and drift flux geometry for diffusion rate `lam`.

    Raises:
        ConfigurationError: lam not positive.
        MeshQualityError: a cell area below 1e-14 or coincident circumcenters.
    """
    if not np.isfinite(lam) or lam <= 0:
        raise ConfigurationError("lambda", lam, "diffusion rate must be positive")
    min_area = float(mesh.cell_areas.min())
    if min_area < MIN_CELL_AREA:
        raise MeshQualityError("degenerate triangle", min_area=min_area)
    edges = mesh.edges
    if np.any(edges.distance <= 0):
        raise MeshQualityError("coincident circumcenters across an edge")

    n = mesh.n_cells
    transmissibility = edges.length / edges.distance
    rows = np.concatenate([edges.left, edges.right, edges.left, edges.right])
    cols = np.concatenate([edges.right, edges.left, edges.left, edges.right])
    data = np.concatenate([transmissibility, transmissibility, -transmissibility, -transmissibility])
    laplacian = sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    return DiscreteOperators(
        mesh=mesh,
        diffusion=float(lam),
        laplacian=laplacian,
        stiffness=(lam * laplacian).tocsr(),
        flux_assembly=DriftFluxAssembly(
            left=edges.left,
            right=edges.right,
            length=edges.length,
            conormal=edges.conormal,
            n_cells=n,
        ),
        mass=mesh.cell_areas.copy(),
    )


# =============================================================================
# INTERPOLATION
# =============================================================================

def transfer_matrix(source_mesh: SphereMesh, target_mesh: SphereMesh) -> sp.csr_matrix:
    """Nearest-aggregation averaging matrix (target cells x source cells)."""
    _, owner = cKDTree(target_mesh.circumcenters).query(source_mesh.circumcenters)
    weights = source_mesh.cell_areas
    assigned = np.bincount(owner, weights=weights, minlength=target_mesh.n_cells)
    empty = int(np.sum(assigned == 0))
    if empty:
        raise InterpolationError(empty)
    data = weights / assigned[owner]
    return sp.csr_matrix(
        (data, (owner, np.arange(source_mesh.n_cells))),
        shape=(target_mesh.n_cells, source_mesh.n_cells),
    )


def interpolate(source_mesh: SphereMesh, field: np.ndarray, target_mesh: SphereMesh) -> np.ndarray:
    """Transfer a cell field (cells on the last axis) to another mesh.

    Each target value is the area-weighted mean of the source cells whose circumcenter
    is nearest to it; a constant shift then restores the source integral exactly.
    """
    field = source_mesh.check_cell_field(field, "interpolation source")
    values = (transfer_matrix(source_mesh, target_mesh) @ field.T).T
    deficit = source_mesh.integrate(field) - target_mesh.integrate(values)
    return values + np.asarray(deficit)[..., None] / target_mesh.total_area
