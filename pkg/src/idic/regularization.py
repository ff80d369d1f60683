"""L2, H1 and total-variation regularization of the log-modulus field.

Gradients of P1 fields are constant per cell, so every TV integral is exact
cell by cell.  The TV dual variable lives in DG0 (one 2-vector per cell).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .mesh import Mesh

DEFAULT_EPS_TV = 1e-2


@dataclass
class RegConfig:
    gamma_l2: float = 0.0
    gamma_h1: float = 0.0
    gamma_tv: float = 0.0
    eps_tv: float = DEFAULT_EPS_TV
    m_ref: np.ndarray | float | None = None
    tv_mode: str = "primal_dual"

    def __post_init__(self):
        for name in ("gamma_l2", "gamma_h1", "gamma_tv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if max(self.gamma_l2, self.gamma_h1, self.gamma_tv) <= 0:
            raise ValueError("at least one regularization weight must be positive")
        if self.gamma_tv > 0 and not self.eps_tv > 0:
            raise ValueError("TV smoothing eps_tv must be positive")
        if self.tv_mode not in ("primal_dual", "primal"):
            raise ValueError(f"unknown tv_mode {self.tv_mode!r}")

    @property
    def uses_tv(self) -> bool:
        return self.gamma_tv > 0

    @property
    def is_quadratic(self) -> bool:
        return self.gamma_tv == 0


@dataclass
class TvDualState:
    """Cellwise dual field with ``|w| <= 1`` on every cell."""

    w: np.ndarray

    @property
    def max_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.w, axis=1))) if self.w.size else 0.0


class Regularization:
    def __init__(self, cfg: RegConfig, mesh: Mesh):
        self.cfg = cfg
        self.mesh = mesh
        self.M = fem.assemble_mass_matrix(mesh)
        self.K = fem.assemble_stiffness_matrix(mesh)

    def _ref(self, m):
        if self.cfg.m_ref is None:
            return np.zeros_like(m)
        return np.broadcast_to(np.asarray(self.cfg.m_ref, dtype=float), m.shape)

    def _tv_parts(self, m):
        g = fem.cell_gradient(self.mesh, m)
        norm_eps = np.sqrt(np.sum(g * g, axis=1) + self.cfg.eps_tv)
        return g, norm_eps

    def value(self, m) -> float:
        m = np.asarray(m, dtype=float)
        c = self.cfg
        total = 0.0
        if c.gamma_l2:
            d = m - self._ref(m)
            total += 0.5 * c.gamma_l2 * float(d @ (self.M @ d))
        if c.gamma_h1:
            total += 0.5 * c.gamma_h1 * float(m @ (self.K @ m))
        if c.gamma_tv:
            _, ne = self._tv_parts(m)
            total += c.gamma_tv * float(np.sum(self.mesh.areas * ne))
        return total

    def gradient(self, m) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        c = self.cfg
        g = np.zeros_like(m)
        if c.gamma_l2:
            g += c.gamma_l2 * (self.M @ (m - self._ref(m)))
        if c.gamma_h1:
            g += c.gamma_h1 * (self.K @ m)
        if c.gamma_tv:
            grad, ne = self._tv_parts(m)
            flux = self.mesh.areas[:, None] * grad / ne[:, None]
            local = np.einsum("cd,cad->ca", flux, self.mesh.basis_gradients)
            g += c.gamma_tv * (fem.scalar_scatter(self.mesh) @ local.ravel())
        return g

    def tv_coefficient(self, m, dual: TvDualState | None) -> np.ndarray:
        """Cellwise 2x2 coefficient of the TV Hessian, without the weight."""
        grad, ne = self._tv_parts(m)
        n = grad / ne[:, None]
        if self.cfg.tv_mode == "primal" or dual is None:
            if self.cfg.tv_mode == "primal_dual" and dual is None:
                raise ValueError("primal-dual TV Hessian needs the dual state")
            A = np.einsum("ci,cj->cij", n, n)
        else:
            w = dual.w
            A = 0.5 * (np.einsum("ci,cj->cij", w, n) + np.einsum("ci,cj->cij", n, w))
        return (np.eye(2)[None] - A) / ne[:, None, None]

    def hessian_matrix(self, m, dual: TvDualState | None = None, include=("l2", "h1", "tv")) -> sp.csr_matrix:
        m = np.asarray(m, dtype=float)
        c = self.cfg
        H = sp.csr_matrix(self.M.shape)
        if c.gamma_l2 and "l2" in include:
            H = H + c.gamma_l2 * self.M
        if c.gamma_h1 and "h1" in include:
            H = H + c.gamma_h1 * self.K
        if c.gamma_tv and "tv" in include:
            H = H + c.gamma_tv * fem.assemble_weighted_stiffness(self.mesh, self.tv_coefficient(m, dual))
        return H.tocsr()

    def hessian_action(self, m, dual: TvDualState | None, mhat) -> np.ndarray:
        return self.hessian_matrix(m, dual) @ np.asarray(mhat, dtype=float)

    def initial_dual(self, m) -> TvDualState:
        grad, ne = self._tv_parts(np.asarray(m, dtype=float))
        return TvDualState(grad / ne[:, None])


def reg_value(cfg: RegConfig, mesh: Mesh, m) -> float:
    return Regularization(cfg, mesh).value(m)


def reg_gradient(cfg: RegConfig, mesh: Mesh, m) -> np.ndarray:
    return Regularization(cfg, mesh).gradient(m)


def reg_hessian_action(cfg: RegConfig, mesh: Mesh, m, dual: TvDualState | None, mhat) -> np.ndarray:
    return Regularization(cfg, mesh).hessian_action(m, dual, mhat)


def max_feasible_step(w: np.ndarray, dw: np.ndarray) -> float:
    """Largest ``alpha`` with ``|w + alpha dw| <= 1`` on every cell (inf if unbounded)."""
    a = np.sum(dw * dw, axis=1)
    b = np.sum(w * dw, axis=1)
    c = 1.0 - np.sum(w * w, axis=1)
    moving = a > 0
    if not moving.any():
        return np.inf
    a, b, c = a[moving], b[moving], np.maximum(c[moving], 0.0)
    alpha = (-b + np.sqrt(b * b + a * c)) / a
    return float(np.min(alpha))


def tv_dual_step(mesh: Mesh, m, w_old: TvDualState, eps_tv: float, dm=None) -> tuple[TvDualState, float]:
    """Newton update of the TV dual field followed by a feasibility line search.

    ``dw = -w + n + (I - A(m, w)) grad(dm) / |grad m|_eps`` with
    ``n = grad m / |grad m|_eps``; the ``dm`` term is dropped when no primal
    step is given.  The step is ``min(1, 0.9 alpha*)`` where ``alpha*`` is the
    largest feasible step.
    """
    m = np.asarray(m, dtype=float)
    g = fem.cell_gradient(mesh, m)
    ne = np.sqrt(np.sum(g * g, axis=1) + eps_tv)
    n = g / ne[:, None]
    w = w_old.w
    dw = -w + n
    if dm is not None:
        gd = fem.cell_gradient(mesh, np.asarray(dm, dtype=float))
        A = 0.5 * (np.einsum("ci,cj->cij", w, n) + np.einsum("ci,cj->cij", n, w))
        dw = dw + np.einsum("cij,cj->ci", np.eye(2)[None] - A, gd) / ne[:, None]
    alpha = min(1.0, 0.9 * max_feasible_step(w, dw))
    w_new = w + alpha * dw
    # guard against round-off pushing a cell over the unit ball
    nrm = np.linalg.norm(w_new, axis=1)
    over = nrm > 1.0
    if over.any():
        w_new[over] /= nrm[over, None]
    return TvDualState(w_new), alpha
