"""Structured triangulations of rectangles and P1 / DG0 fields on them.

Every cell of the grid is split along its lower-left to upper-right diagonal,
so a point can be located in O(1) from its grid coordinates.  The same class
backs the unit-square specimen mesh and the (padded) image meshes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SIDES = ("left", "right", "bottom", "top")


class OutOfDomainError(ValueError):
    """Raised when a field is evaluated outside the mesh it lives on."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Uniform grid of ``nx * ny`` square cells of size ``h``, two triangles each.

    Vertices are numbered row-major (``k = j * (nx + 1) + i``).  Cell ``(i, j)``
    owns triangles ``2c`` = (v00, v10, v11) and ``2c + 1`` = (v00, v11, v01)
    with ``c = j * nx + i``; both are counter-clockwise.
    """

    nx: int
    ny: int
    h: float
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"mesh needs at least one cell per side, got {self.nx}x{self.ny}")
        if not self.h > 0:
            raise ValueError("cell size must be positive")

    @property
    def n_per_side(self) -> int:
        return self.nx

    @property
    def num_vertices(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def num_cells(self) -> int:
        return 2 * self.nx * self.ny

    @property
    def extent(self) -> tuple[float, float, float, float]:
        return (self.x0, self.x0 + self.nx * self.h, self.y0, self.y0 + self.ny * self.h)

    @cached_property
    def vertices(self) -> np.ndarray:
        i, j = np.meshgrid(np.arange(self.nx + 1), np.arange(self.ny + 1))
        xy = np.column_stack([self.x0 + i.ravel() * self.h, self.y0 + j.ravel() * self.h])
        xy.setflags(write=False)
        return xy

    @cached_property
    def triangles(self) -> np.ndarray:
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        i, j = i.ravel(), j.ravel()
        stride = self.nx + 1
        v00 = j * stride + i
        v10 = v00 + 1
        v01 = v00 + stride
        v11 = v01 + 1
        tri = np.empty((self.num_cells, 3), dtype=np.int64)
        tri[0::2] = np.column_stack([v00, v10, v11])
        tri[1::2] = np.column_stack([v00, v11, v01])
        tri.setflags(write=False)
        return tri

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Constant gradients of the three P1 basis functions, shape (ncell, 3, 2)."""
        p = self.vertices[self.triangles]
        twice_area = 2.0 * self.signed_areas
        grads = np.empty((self.num_cells, 3, 2))
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            grads[:, a, 0] = (p[:, b, 1] - p[:, c, 1]) / twice_area
            grads[:, a, 1] = (p[:, c, 0] - p[:, b, 0]) / twice_area
        grads.setflags(write=False)
        return grads

    @cached_property
    def boundary_edges(self) -> dict[str, np.ndarray]:
        """Boundary edges per side as vertex-index pairs."""
        stride = self.nx + 1
        bottom = np.arange(self.nx)
        top = self.ny * stride + np.arange(self.nx)
        left = np.arange(self.ny) * stride
        right = left + self.nx
        return {
            "bottom": np.column_stack([bottom, bottom + 1]),
            "top": np.column_stack([top, top + 1]),
            "left": np.column_stack([left, left + stride]),
            "right": np.column_stack([right, right + stride]),
        }

    def boundary_vertices(self, side: str) -> np.ndarray:
        return np.unique(self.boundary_edges[side])

    @cached_property
    def edges(self) -> np.ndarray:
        """All unique edges as sorted vertex pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def edge_tags(self) -> dict[tuple[int, int], str]:
        tags = {}
        for side in SIDES:
            for a, b in self.boundary_edges[side]:
                tags[(min(a, b), max(a, b))] = side
        return tags

    # -- point location -------------------------------------------------

    def locate(self, points: np.ndarray, *, clip: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Containing triangle and barycentric coordinates for each point.

        Returns ``(cells, bary)`` with ``bary[:, a]`` the weight of
        ``triangles[cells, a]``.  Points on shared edges go to the lower cell.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        gx = (pts[:, 0] - self.x0) / self.h
        gy = (pts[:, 1] - self.y0) / self.h
        tol = 1e-9
        outside = (gx < -tol) | (gx > self.nx + tol) | (gy < -tol) | (gy > self.ny + tol)
        if outside.any():
            if not clip:
                bad = pts[np.argmax(outside)]
                raise OutOfDomainError(
                    f"{int(outside.sum())} point(s) outside mesh extent {self.extent}, e.g. {tuple(bad)}")
            gx = np.clip(gx, 0.0, self.nx)
            gy = np.clip(gy, 0.0, self.ny)
        i = np.clip(np.floor(gx).astype(np.int64), 0, self.nx - 1)
        j = np.clip(np.floor(gy).astype(np.int64), 0, self.ny - 1)
        xi = np.clip(gx - i, 0.0, 1.0)
        eta = np.clip(gy - j, 0.0, 1.0)
        lower = xi >= eta
        cells = 2 * (j * self.nx + i) + (~lower)
        bary = np.where(
            lower[:, None],
            np.column_stack([1.0 - xi, xi - eta, eta]),
            np.column_stack([1.0 - eta, xi, eta - xi]),
        )
        return cells, bary

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        x1, x2, y1, y2 = self.extent
        tol = 1e-9 * self.h
        return ((pts[:, 0] >= x1 - tol) & (pts[:, 0] <= x2 + tol)
                & (pts[:, 1] >= y1 - tol) & (pts[:, 1] <= y2 + tol))

    def evaluate(self, values: np.ndarray, points: np.ndarray, *, clip: bool = False) -> np.ndarray:
        """P1 interpolation of nodal ``values`` (shape (nv,) or (nv, k)) at points."""
        cells, bary = self.locate(points, clip=clip)
        vals = np.asarray(values)[self.triangles[cells]]
        if vals.ndim == 2:
            return np.einsum("pa,pa->p", bary, vals)
        return np.einsum("pa,pak->pk", bary, vals)

    def evaluate_with_gradient(self, values: np.ndarray, points: np.ndarray, *, clip: bool = False):
        """Value and the containing triangle's constant gradient of a scalar P1 field."""
        cells, bary = self.locate(points, clip=clip)
        vals = np.asarray(values)[self.triangles[cells]]
        value = np.einsum("pa,pa->p", bary, vals)
        grad = np.einsum("pa,pad->pd", vals, self.basis_gradients[cells])
        return value, grad

    def interpolate(self, fn) -> np.ndarray:
        """Nodal interpolant of ``fn(x, y)``."""
        x, y = self.vertices.T
        return np.asarray(fn(x, y), dtype=float) * np.ones(self.num_vertices)


def build_unit_square_mesh(n_per_side: int) -> Mesh:
    """N x N triangulation of the unit square."""
    n = int(n_per_side)
    if n < 1:
        raise ValueError(f"n_per_side must be >= 1, got {n_per_side}")
    return Mesh(n, n, 1.0 / n)


@dataclass(frozen=True, eq=False)
class ScalarField:
    """P1 scalar field: one value per mesh vertex."""

    mesh: Mesh
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.mesh.num_vertices,):
            raise ValueError(f"expected {self.mesh.num_vertices} nodal values, got shape {vals.shape}")
        object.__setattr__(self, "values", vals)

    def __call__(self, points):
        return self.mesh.evaluate(self.values, points)


@dataclass(frozen=True, eq=False)
class VectorField:
    """P1 vector field stored as an (nv, 2) array; flat DOFs are interleaved (x, y)."""

    mesh: Mesh
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals.reshape(-1, 2)
        if vals.shape != (self.mesh.num_vertices, 2):
            raise ValueError(f"expected ({self.mesh.num_vertices}, 2) nodal values, got {vals.shape}")
        object.__setattr__(self, "values", vals)

    @property
    def dofs(self) -> np.ndarray:
        return self.values.ravel()

    def __call__(self, points):
        return self.mesh.evaluate(self.values, points)


@dataclass(frozen=True, eq=False)
class CellVectorField:
    """DG0 vector field: one 2-vector per triangle."""

    mesh: Mesh
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.mesh.num_cells, 2):
            raise ValueError(f"expected ({self.mesh.num_cells}, 2) cell values, got {vals.shape}")
        object.__setattr__(self, "values", vals)


def interpolate_at_point(f: ScalarField | VectorField, x) -> np.ndarray:
    """Evaluate a P1 field at a point (or array of points)."""
    pts = np.asarray(x, dtype=float)
    out = f.mesh.evaluate(f.values, pts.reshape(-1, 2))
    return out[0] if pts.ndim == 1 else out
