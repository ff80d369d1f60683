"""Constitutive laws and the weak residuals of the two elasticity models.

Both models are parameterized by the log Young's modulus ``m`` (``E = exp(m)``)
at a fixed Poisson ratio, in plane strain.  Because ``grad u`` of a P1 field is
constant on a cell, every integral over a cell factors into a cell modulus
``E_c`` (three-point mid-edge quadrature of ``exp(m)``) times a unit-modulus
constitutive quantity.  That factorization carries through to all partial
derivatives with respect to ``u`` and ``m``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import fem
from .mesh import Mesh, ScalarField

DEFAULT_POISSON = 0.35


class InvertedElementError(ArithmeticError):
    """Deformation gradient with non-positive determinant."""


@dataclass(frozen=True)
class TractionSpec:
    """Constant traction ``t = t_normal e1 + t_shear e2`` on the right edge."""

    t_normal: float = 0.0
    t_shear: float = 0.0

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.t_normal, self.t_shear], dtype=float)

    def scaled(self, factor: float) -> "TractionSpec":
        return TractionSpec(self.t_normal * factor, self.t_shear * factor)


@dataclass(frozen=True)
class LameFields:
    lam: np.ndarray
    mu: np.ndarray


def lame_factors(nu: float) -> tuple[float, float]:
    """Lame parameters for unit Young's modulus."""
    if not 0.0 < nu < 0.5:
        raise ValueError(f"Poisson ratio must lie in (0, 0.5), got {nu}")
    return nu / ((1 + nu) * (1 - 2 * nu)), 1.0 / (2 * (1 + nu))


def lame_from_log_modulus(m, nu: float = DEFAULT_POISSON) -> LameFields:
    """Pointwise ``lambda`` and ``mu`` for ``E = exp(m)``."""
    lam1, mu1 = lame_factors(nu)
    vals = m.values if isinstance(m, ScalarField) else np.asarray(m, dtype=float)
    E = np.exp(vals)
    return LameFields(lam1 * E, mu1 * E)


# -- cell modulus and its m-derivatives ---------------------------------------

def _edge_exp(mesh: Mesh, m: np.ndarray) -> np.ndarray:
    """exp(m) at the midpoint of the edge opposite each local vertex, (ncell, 3)."""
    mt = np.asarray(m)[mesh.triangles]
    mid = 0.5 * (mt[:, [1, 2, 0]] + mt[:, [2, 0, 1]])
    return np.exp(mid)


def cell_modulus(mesh: Mesh, m: np.ndarray) -> np.ndarray:
    """Cell average of exp(m) under the mid-edge rule."""
    return _edge_exp(mesh, m).mean(axis=1)


def cell_modulus_jacobian(mesh: Mesh, m: np.ndarray) -> sp.csr_matrix:
    """Sparse ``dE_c / dm_i``, shape (ncell, nv)."""
    X = _edge_exp(mesh, m)
    # vertex a sits on the two edges opposite the other vertices
    local = (X.sum(axis=1, keepdims=True) - X) / 6.0
    rows = np.repeat(np.arange(mesh.num_cells), 3)
    return sp.csr_matrix((local.ravel(), (rows, mesh.triangles.ravel())),
                         shape=(mesh.num_cells, mesh.num_vertices))


def cell_modulus_hessian(mesh: Mesh, m: np.ndarray) -> np.ndarray:
    """Local ``d2 E_c / dm_a dm_b``, shape (ncell, 3, 3)."""
    X = _edge_exp(mesh, m)
    H = np.empty((mesh.num_cells, 3, 3))
    for a in range(3):
        for b in range(3):
            if a == b:
                H[:, a, a] = (X.sum(axis=1) - X[:, a]) / 12.0
            else:
                H[:, a, b] = X[:, 3 - a - b] / 12.0
    return H


# -- constitutive models (unit Young's modulus) -------------------------------

_I2 = np.eye(2)


class LinearElastic:
    name = "linear"

    def __init__(self, nu: float = DEFAULT_POISSON):
        self.nu = nu
        self.lam, self.mu = lame_factors(nu)
        d = _I2
        self._C = (self.lam * np.einsum("ij,kl->ijkl", d, d)
                   + self.mu * (np.einsum("ik,jl->ijkl", d, d) + np.einsum("il,jk->ijkl", d, d)))

    def check(self, G):
        pass

    def stress(self, G: np.ndarray) -> np.ndarray:
        eps = 0.5 * (G + G.transpose(0, 2, 1))
        tr = eps[:, 0, 0] + eps[:, 1, 1]
        return self.lam * tr[:, None, None] * _I2 + 2 * self.mu * eps

    def tangent(self, G: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self._C, (G.shape[0], 2, 2, 2, 2))

    def energy(self, G: np.ndarray) -> np.ndarray:
        eps = 0.5 * (G + G.transpose(0, 2, 1))
        return 0.5 * np.einsum("cij,cij->c", self.stress(G), eps)

    def third(self, G, A, B):
        return np.zeros_like(G)


class NeoHookean:
    """``W = mu/2 (tr C - 3) - mu ln J + lam/2 ln^2 J`` with ``tr C = |F|^2 + 1`` (plane strain)."""

    name = "neo_hookean"

    def __init__(self, nu: float = DEFAULT_POISSON):
        self.nu = nu
        self.lam, self.mu = lame_factors(nu)

    @staticmethod
    def _kinematics(G):
        F = G + _I2
        J = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
        if np.any(J <= 0) or not np.all(np.isfinite(J)):
            raise InvertedElementError(f"{int(np.sum(~(J > 0)))} cell(s) with det F <= 0")
        # H = F^{-T}
        H = np.empty_like(F)
        H[:, 0, 0] = F[:, 1, 1]
        H[:, 0, 1] = -F[:, 1, 0]
        H[:, 1, 0] = -F[:, 0, 1]
        H[:, 1, 1] = F[:, 0, 0]
        H /= J[:, None, None]
        return F, J, H

    def check(self, G):
        self._kinematics(G)

    def stress(self, G: np.ndarray) -> np.ndarray:
        """First Piola-Kirchhoff stress ``P = F S``."""
        F, J, H = self._kinematics(G)
        lnJ = np.log(J)
        return self.mu * F + (self.lam * lnJ - self.mu)[:, None, None] * H

    def tangent(self, G: np.ndarray) -> np.ndarray:
        F, J, H = self._kinematics(G)
        c = (self.lam * np.log(J) - self.mu)[:, None, None, None, None]
        return (self.mu * np.einsum("ik,jl->ijkl", _I2, _I2)[None]
                + self.lam * np.einsum("cij,ckl->cijkl", H, H)
                - c * np.einsum("cil,ckj->cijkl", H, H))

    def energy(self, G: np.ndarray) -> np.ndarray:
        F, J, H = self._kinematics(G)
        lnJ = np.log(J)
        return 0.5 * self.mu * (np.einsum("cij,cij->c", F, F) - 2.0) - self.mu * lnJ + 0.5 * self.lam * lnJ**2

    def third(self, G: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """Matrix ``T`` with ``T : K = D^3 W(F)[A, B, K]`` per cell."""
        F, J, H = self._kinematics(G)
        lnJ = np.log(J)
        c = self.lam * lnJ - self.mu
        HA = np.einsum("cij,cij->c", H, A)
        HAtH = H @ A.transpose(0, 2, 1) @ H
        T = np.empty_like(G)
        for k in range(2):
            for l in range(2):
                K = np.zeros_like(G)
                K[:, k, l] = 1.0
                dH = -H @ K.transpose(0, 2, 1) @ H
                HK = H[:, k, l]
                d2P = (self.lam * np.einsum("cij,cij->c", dH, A)[:, None, None] * H
                       + self.lam * HA[:, None, None] * dH
                       - self.lam * HK[:, None, None] * HAtH
                       - c[:, None, None] * (dH @ A.transpose(0, 2, 1) @ H + H @ A.transpose(0, 2, 1) @ dH))
                T[:, k, l] = np.einsum("cij,cij->c", d2P, B)
        return T


MODELS = {"linear": LinearElastic, "neo_hookean": NeoHookean}


# -- residual form ------------------------------------------------------------

class ResidualForm:
    """Weak residual ``r(u, m, t, v)`` of an elasticity model on a mesh.

    Vectors over displacement DOFs are interleaved (x, y) per vertex and cover
    every DOF; Dirichlet handling is left to the solvers.  Clamped side is
    ``left``, traction acts on ``right``.
    """

    def __init__(self, mesh: Mesh, model: str = "linear", nu: float = DEFAULT_POISSON):
        if model not in MODELS:
            raise ValueError(f"unknown model {model!r}; choose from {sorted(MODELS)}")
        self.mesh = mesh
        self.model_name = model
        self.model = MODELS[model](nu)
        self.nu = nu
        self.fixed_dofs = fem.dirichlet_dofs(mesh, "left")

    @property
    def is_linear(self) -> bool:
        return self.model_name == "linear"

    @property
    def ndof(self) -> int:
        return 2 * self.mesh.num_vertices

    @cached_property
    def _grads(self):
        return self.mesh.basis_gradients

    def grad_u(self, u) -> np.ndarray:
        return fem.cell_displacement_gradient(self.mesh, u)

    def _local_force(self, P: np.ndarray) -> np.ndarray:
        """(ncell, 6) local vectors ``area * P : grad(phi_a e_i)``."""
        f = np.einsum("ciJ,caJ->cai", P, self._grads)
        return (self.mesh.areas[:, None, None] * f).reshape(-1, 6)

    def _local_tangent(self, C: np.ndarray) -> np.ndarray:
        K = np.einsum("caJ,ciJkL,cbL->caibk", self._grads, C, self._grads)
        return (self.mesh.areas[:, None, None, None, None] * K).reshape(-1, 6, 6)

    @cached_property
    def _unit_tangent_linear(self):
        G0 = np.zeros((self.mesh.num_cells, 2, 2))
        return self._local_tangent(LinearElastic(self.nu).tangent(G0))

    def unit_local_tangent(self, u) -> np.ndarray:
        if self.is_linear:
            return self._unit_tangent_linear
        return self._local_tangent(self.model.tangent(self.grad_u(u)))

    def _local_dofs(self, v) -> np.ndarray:
        return np.asarray(v).ravel()[fem.vector_cell_dofs(self.mesh)]

    def _scatter(self, local: np.ndarray) -> np.ndarray:
        return fem.vector_scatter(self.mesh) @ local.ravel()

    # -- evaluation -----------------------------------------------------------

    def traction_vector(self, t: TractionSpec) -> np.ndarray:
        return fem.traction_load(self.mesh, "right", t.vector)

    def unit_internal_local(self, u) -> np.ndarray:
        return self._local_force(self.model.stress(self.grad_u(u)))

    def internal_force(self, u, m) -> np.ndarray:
        E = cell_modulus(self.mesh, m)
        return self._scatter(E[:, None] * self.unit_internal_local(u))

    def residual_vector(self, u, m, t: TractionSpec, extra_load=None) -> np.ndarray:
        r = self.internal_force(u, m) - self.traction_vector(t)
        if extra_load is not None:
            r = r - extra_load
        return r

    def residual(self, u, m, t: TractionSpec, v) -> float:
        return float(self.residual_vector(u, m, t) @ np.asarray(v).ravel())

    def energy(self, u, m) -> float:
        E = cell_modulus(self.mesh, m)
        return float(np.sum(self.mesh.areas * E * self.model.energy(self.grad_u(u))))

    def check_admissible(self, u):
        self.model.check(self.grad_u(u))

    # -- partial derivatives --------------------------------------------------

    def tangent(self, u, m) -> sp.csr_matrix:
        """Assembled ``d_u r`` (symmetric for both models)."""
        E = cell_modulus(self.mesh, m)
        return fem.assemble_vector(self.mesh, E[:, None, None] * self.unit_local_tangent(u))

    def dm_action(self, u, m, mhat) -> np.ndarray:
        """Vector over test DOFs: ``<d_m r(u, m, t, .), mhat>``."""
        a = cell_modulus_jacobian(self.mesh, m) @ np.asarray(mhat)
        return self._scatter(a[:, None] * self.unit_internal_local(u))

    def dm_adjoint(self, u, m, p) -> np.ndarray:
        """Vector over parameter DOFs: ``<d_m r(u, m, t, p), mtilde>``."""
        s = np.einsum("ck,ck->c", self.unit_internal_local(u), self._local_dofs(p))
        return cell_modulus_jacobian(self.mesh, m).T @ s

    def dmu(self, u, m, p, mhat) -> np.ndarray:
        """Vector over ``utilde``: ``<d_mu r(u, m, t, p) mhat, utilde>``."""
        a = cell_modulus_jacobian(self.mesh, m) @ np.asarray(mhat)
        Kp = np.einsum("ckl,cl->ck", self.unit_local_tangent(u), self._local_dofs(p))
        return self._scatter(a[:, None] * Kp)

    def dum(self, u, m, p, uhat) -> np.ndarray:
        """Vector over ``mtilde``: ``<d_um r(u, m, t, p) uhat, mtilde>``."""
        s = np.einsum("ck,ckl,cl->c", self._local_dofs(p), self.unit_local_tangent(u), self._local_dofs(uhat))
        return cell_modulus_jacobian(self.mesh, m).T @ s

    def duu(self, u, m, p, uhat) -> np.ndarray:
        """Vector over ``utilde``: ``<d_uu r(u, m, t, p) uhat, utilde>`` (zero for linear)."""
        if self.is_linear:
            return np.zeros(self.ndof)
        E = cell_modulus(self.mesh, m)
        G = self.grad_u(u)
        A = self.grad_u(uhat)
        B = self.grad_u(p)
        T = self.model.third(G, A, B)
        return self._scatter(E[:, None] * self._local_force(T))

    def dmm(self, u, m, p, mhat) -> np.ndarray:
        """Vector over ``mtilde``: ``<d_mm r(u, m, t, p) mhat, mtilde>``."""
        s = np.einsum("ck,ck->c", self.unit_internal_local(u), self._local_dofs(p))
        H2 = cell_modulus_hessian(self.mesh, m)
        local = s[:, None] * np.einsum("cab,cb->ca", H2, np.asarray(mhat)[self.mesh.triangles])
        return fem.scalar_scatter(self.mesh) @ local.ravel()


def residual_linear_elastic(u, m, t: TractionSpec, v, nu: float = DEFAULT_POISSON) -> float:
    """``int sigma(u, m) : eps(v) dx - int_{Gamma_R} t . v ds``."""
    mesh = _common_mesh(u, m, v)
    return ResidualForm(mesh, "linear", nu).residual(u.dofs, m.values, t, v.dofs)


def residual_neo_hookean(u, m, t: TractionSpec, v, nu: float = DEFAULT_POISSON) -> float:
    """First variation of the neo-Hookean stored energy minus the traction work."""
    mesh = _common_mesh(u, m, v)
    return ResidualForm(mesh, "neo_hookean", nu).residual(u.dofs, m.values, t, v.dofs)


def _common_mesh(*fields):
    mesh = fields[0].mesh
    if any(f.mesh is not mesh for f in fields[1:]):
        raise ValueError("fields live on different meshes")
    return mesh


def residual_partials(form: ResidualForm, which: str, u, m, p=None, direction=None):
    """Dispatch to one of the six partials of the residual.

    ``du`` returns the tangent operator; ``dm`` with a ``p`` returns the vector
    over parameters, without ``p`` the action on ``direction``.  Mixed and second
    partials take the adjoint-like weight ``p`` and a direction.
    """
    if which == "du":
        return form.tangent(u, m)
    if which == "dm":
        return form.dm_adjoint(u, m, p) if p is not None else form.dm_action(u, m, direction)
    if which == "duu":
        return form.duu(u, m, p, direction)
    if which == "dum":
        return form.dum(u, m, p, direction)
    if which == "dmu":
        return form.dmu(u, m, p, direction)
    if which == "dmm":
        return form.dmm(u, m, p, direction)
    raise ValueError(f"unknown partial {which!r}")
