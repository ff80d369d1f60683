"""P1 assembly, quadrature, boundary conditions and linear solvers."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh

log = logging.getLogger(__name__)

_LOCAL_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0


class SolverError(RuntimeError):
    """Linear or nonlinear solve that did not reach its tolerance."""

    def __init__(self, message: str, residual: float = float("nan"), iterations: int = -1):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


# -- index bookkeeping --------------------------------------------------------

@lru_cache(maxsize=64)
def _scalar_index(mesh: Mesh):
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return rows, cols


@lru_cache(maxsize=64)
def vector_cell_dofs(mesh: Mesh) -> np.ndarray:
    """Interleaved vector DOFs per cell, ordered (v0x, v0y, v1x, v1y, v2x, v2y)."""
    t = mesh.triangles
    return np.stack([2 * t, 2 * t + 1], axis=2).reshape(-1, 6)


@lru_cache(maxsize=64)
def _vector_index(mesh: Mesh):
    d = vector_cell_dofs(mesh)
    return np.repeat(d, 6, axis=1).ravel(), np.tile(d, (1, 6)).ravel()


@lru_cache(maxsize=64)
def vector_scatter(mesh: Mesh) -> sp.csr_matrix:
    """Sparse (ndof, 6 * ncell) matrix summing per-cell local vectors into global DOFs."""
    d = vector_cell_dofs(mesh).ravel()
    n = 2 * mesh.num_vertices
    return sp.csr_matrix((np.ones(d.size), (d, np.arange(d.size))), shape=(n, d.size))


@lru_cache(maxsize=64)
def scalar_scatter(mesh: Mesh) -> sp.csr_matrix:
    t = mesh.triangles.ravel()
    return sp.csr_matrix((np.ones(t.size), (t, np.arange(t.size))), shape=(mesh.num_vertices, t.size))


def assemble_scalar(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    rows, cols = _scalar_index(mesh)
    n = mesh.num_vertices
    return sp.csr_matrix((np.asarray(local).ravel(), (rows, cols)), shape=(n, n))


def assemble_vector(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    rows, cols = _vector_index(mesh)
    n = 2 * mesh.num_vertices
    return sp.csr_matrix((np.asarray(local).ravel(), (rows, cols)), shape=(n, n))


# -- standard operators -------------------------------------------------------

@lru_cache(maxsize=64)
def assemble_mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix (exact for P1 x P1)."""
    local = mesh.areas[:, None, None] * _LOCAL_MASS[None]
    return assemble_scalar(mesh, local)


@lru_cache(maxsize=64)
def assemble_stiffness_matrix(mesh: Mesh) -> sp.csr_matrix:
    """P1 Laplacian ``int grad(u) . grad(v)``."""
    return assemble_weighted_stiffness(mesh, None)


def assemble_weighted_stiffness(mesh: Mesh, coeff: np.ndarray | None) -> sp.csr_matrix:
    """``int (C grad u) . grad v`` with a cellwise constant coefficient.

    ``coeff`` may be None (identity), shape (ncell,) or (ncell, 2, 2).
    """
    g = mesh.basis_gradients
    a = mesh.areas
    if coeff is None:
        local = np.einsum("cad,cbd->cab", g, g)
    else:
        coeff = np.asarray(coeff)
        if coeff.ndim == 1:
            local = coeff[:, None, None] * np.einsum("cad,cbd->cab", g, g)
        else:
            local = np.einsum("cbe,cde,cad->cab", g, coeff, g)
    return assemble_scalar(mesh, a[:, None, None] * local)


def cell_gradient(mesh: Mesh, f: np.ndarray) -> np.ndarray:
    """Constant gradient of a P1 scalar field on each cell, shape (ncell, 2)."""
    return np.einsum("ca,cad->cd", np.asarray(f)[mesh.triangles], mesh.basis_gradients)


def cell_displacement_gradient(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """Cellwise ``grad u`` (``G[c, i, J] = d u_i / d X_J``) of a P1 vector field."""
    u = np.asarray(u).reshape(-1, 2)
    return np.einsum("cai,caj->cij", u[mesh.triangles], mesh.basis_gradients)


# -- quadrature ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Barycentric points and weights (fractions of the cell area, summing to 1)."""

    bary: np.ndarray
    weights: np.ndarray
    name: str = "midedge"


def midedge_rule(subdivisions: int = 1) -> QuadratureRule:
    """Three-point mid-edge rule, optionally applied on a uniform s x s subdivision.

    ``subdivisions=1`` is the plain rule, exact for quadratics.  Points shared
    by neighbouring sub-triangles are merged.
    """
    s = int(subdivisions)
    if s < 1:
        raise ValueError("subdivisions must be >= 1")
    subtris = []
    for i in range(s):
        for j in range(s - i):
            subtris.append(((i, j), (i + 1, j), (i, j + 1)))
            if i + j <= s - 2:
                subtris.append(((i + 1, j), (i + 1, j + 1), (i, j + 1)))
    acc: dict[tuple[int, int], float] = {}
    w = 1.0 / (3 * s * s)
    for tri in subtris:
        for a in range(3):
            p, q = tri[a], tri[(a + 1) % 3]
            key = (p[0] + q[0], p[1] + q[1])  # doubled lattice coordinates of the midpoint
            acc[key] = acc.get(key, 0.0) + w
    keys = sorted(acc)
    xi = np.array([k[0] for k in keys], dtype=float) / (2 * s)
    eta = np.array([k[1] for k in keys], dtype=float) / (2 * s)
    bary = np.column_stack([1.0 - xi - eta, xi, eta])
    return QuadratureRule(bary, np.array([acc[k] for k in keys]), f"midedge-s{s}")


@dataclass(frozen=True, eq=False)
class CellQuadrature:
    """A quadrature rule laid out over every cell of a mesh.

    ``points`` has shape (ncell * nq, 2) with cell-major ordering; ``interp``
    maps nodal P1 values to point values.
    """

    mesh: Mesh
    rule: QuadratureRule
    points: np.ndarray
    weights: np.ndarray
    interp: sp.csr_matrix

    @property
    def num_local(self) -> int:
        return len(self.rule.weights)


@lru_cache(maxsize=64)
def cell_quadrature(mesh: Mesh, subdivisions: int = 1) -> CellQuadrature:
    rule = midedge_rule(subdivisions)
    nq = len(rule.weights)
    tri = mesh.triangles
    xy = mesh.vertices[tri]  # (ncell, 3, 2)
    points = np.einsum("qa,cad->cqd", rule.bary, xy).reshape(-1, 2)
    weights = (mesh.areas[:, None] * rule.weights[None, :]).ravel()
    rows = np.repeat(np.arange(points.shape[0]), 3)
    cols = np.repeat(tri, nq, axis=0).ravel()
    vals = np.tile(rule.bary, (mesh.num_cells, 1)).ravel()
    interp = sp.csr_matrix((vals, (rows, cols)), shape=(points.shape[0], mesh.num_vertices))
    return CellQuadrature(mesh, rule, points, weights, interp)


# -- loads --------------------------------------------------------------------

def traction_load(mesh: Mesh, side: str, traction) -> np.ndarray:
    """Assembled ``int_side t . v ds`` for a constant traction or a callable ``t(x, y)``.

    Constant tractions are integrated exactly; callables use 2-point Gauss per edge.
    """
    f = np.zeros((mesh.num_vertices, 2))
    edges = mesh.boundary_edges[side]
    pa, pb = mesh.vertices[edges[:, 0]], mesh.vertices[edges[:, 1]]
    length = np.linalg.norm(pb - pa, axis=1)
    if callable(traction):
        g = 0.5 / np.sqrt(3.0)
        for s in (0.5 - g, 0.5 + g):
            x = (1 - s) * pa + s * pb
            t = np.asarray(traction(x[:, 0], x[:, 1]), dtype=float).reshape(2, -1).T
            contrib = 0.5 * length[:, None] * t
            np.add.at(f, edges[:, 0], (1 - s) * contrib)
            np.add.at(f, edges[:, 1], s * contrib)
    else:
        t = np.asarray(traction, dtype=float)
        contrib = 0.5 * length[:, None] * t[None, :]
        np.add.at(f, edges[:, 0], contrib)
        np.add.at(f, edges[:, 1], contrib)
    return f.ravel()


def body_load(mesh: Mesh, force, subdivisions: int = 2) -> np.ndarray:
    """Assembled ``int b . v dx`` for a callable body force ``b(x, y) -> (bx, by)``."""
    q = cell_quadrature(mesh, subdivisions)
    b = np.asarray(force(q.points[:, 0], q.points[:, 1]), dtype=float).reshape(2, -1).T
    wb = q.weights[:, None] * b
    return np.column_stack([q.interp.T @ wb[:, 0], q.interp.T @ wb[:, 1]]).ravel()


# -- Dirichlet conditions and solvers -----------------------------------------

def dirichlet_dofs(mesh: Mesh, side: str = "left") -> np.ndarray:
    v = mesh.boundary_vertices(side)
    return np.sort(np.concatenate([2 * v, 2 * v + 1]))


def apply_dirichlet(A: sp.spmatrix, b: np.ndarray | None, dofs: np.ndarray, values=None):
    """Symmetric elimination: zero rows and columns, unit diagonal, RHS lifted."""
    n = A.shape[0]
    fixed = np.zeros(n, dtype=bool)
    fixed[dofs] = True
    vals = np.zeros(n)
    if values is not None:
        vals[dofs] = values
    keep = sp.diags((~fixed).astype(float))
    A = sp.csr_matrix(A)
    out = keep @ A @ keep + sp.diags(fixed.astype(float))
    if b is None:
        return out.tocsr(), None
    rhs = np.asarray(b, dtype=float) - A @ vals
    rhs[fixed] = vals[fixed]
    return out.tocsr(), rhs


def solve_spd(A: sp.spmatrix, b: np.ndarray, tol: float = 1e-10, method: str = "cg",
              maxiter: int | None = None) -> np.ndarray:
    """Solve an SPD system to ``||Ax - b|| <= tol ||b||``.

    ``method="cg"`` is Jacobi-preconditioned conjugate gradients; ``"direct"``
    is a sparse LU factorization.
    """
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    A = sp.csr_matrix(A)
    if method == "direct":
        x = spla.spsolve(A.tocsc(), b)
    elif method == "cg":
        x = _jacobi_pcg(A, b, tol, maxiter or 10 * A.shape[0])
    else:
        raise ValueError(f"unknown solver method {method!r}")
    res = np.linalg.norm(A @ x - b)
    if not res <= tol * bnorm * (1 + 1e-6) and method == "direct":
        log.debug("direct solve residual %.3e above tolerance", res / bnorm)
    return x


def _jacobi_pcg(A, b, tol, maxiter):
    dinv = 1.0 / A.diagonal()
    x = np.zeros_like(b)
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = r @ z
    target = tol * np.linalg.norm(b)
    for k in range(maxiter):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= target:
            return x
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    # recursive residual can drift; accept if the true residual is fine
    true_res = np.linalg.norm(A @ x - b)
    if true_res <= target:
        return x
    raise SolverError(f"CG did not converge in {maxiter} iterations (relative residual "
                      f"{true_res / np.linalg.norm(b):.3e})", true_res, maxiter)


class Factorization:
    """Reusable sparse LU factorization of a (Dirichlet-eliminated) operator."""

    def __init__(self, A: sp.spmatrix):
        self.A = sp.csc_matrix(A)
        try:
            self._lu = spla.splu(self.A)
        except RuntimeError as exc:
            raise SolverError(f"singular operator: {exc}") from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        x = self._lu.solve(np.asarray(b, dtype=float))
        if not np.all(np.isfinite(x)):
            raise SolverError("non-finite solution from factorization")
        return x
