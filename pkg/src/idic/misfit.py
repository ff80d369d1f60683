"""Image misfit ``1/2 int_Omega |I1(x + u(x)) - I0(x)|^2 dx`` and its u-derivatives."""

from __future__ import annotations

from functools import cached_property

import numpy as np

from . import fem
from .mesh import Mesh


class MisfitContext:
    """Image pair plus the quadrature used to integrate over the specimen mesh.

    ``subdivisions`` refines the mid-edge rule on each cell so that images
    finer than the specimen mesh are sampled adequately.
    """

    def __init__(self, mesh: Mesh, I0, I1, subdivisions: int = 1):
        self.mesh = mesh
        self.I0 = I0
        self.I1 = I1
        self.subdivisions = int(subdivisions)
        self.quad = fem.cell_quadrature(mesh, self.subdivisions)

    @cached_property
    def reference_values(self) -> np.ndarray:
        return np.asarray(self.I0(self.quad.points), dtype=float)

    def linearize(self, u) -> "MisfitState":
        return MisfitState(self, np.asarray(u, dtype=float).ravel())


class MisfitState:
    """Misfit quantities at a fixed displacement; reused across Hessian actions."""

    def __init__(self, ctx: MisfitContext, u: np.ndarray):
        self.ctx = ctx
        Q = ctx.quad.interp
        U = u.reshape(-1, 2)
        self.u_points = np.column_stack([Q @ U[:, 0], Q @ U[:, 1]])
        self.deformed_points = ctx.quad.points + self.u_points
        vals, grads = ctx.I1.value_and_gradient(self.deformed_points)
        self.image_values = np.asarray(vals, dtype=float)
        self.image_gradients = np.asarray(grads, dtype=float)
        self.residual = self.image_values - ctx.reference_values

    @property
    def value(self) -> float:
        return 0.5 * float(np.sum(self.ctx.quad.weights * self.residual**2))

    def _back(self, coeff_x, coeff_y) -> np.ndarray:
        QT = self.ctx.quad.interp.T
        return np.column_stack([QT @ coeff_x, QT @ coeff_y]).ravel()

    @cached_property
    def gradient(self) -> np.ndarray:
        s = self.ctx.quad.weights * self.residual
        g = self.image_gradients
        return self._back(s * g[:, 0], s * g[:, 1])

    def gn_action(self, uhat) -> np.ndarray:
        """Gauss-Newton Hessian applied to ``uhat``: ``int (grad I1 . uhat)(grad I1 . utilde)``."""
        Q = self.ctx.quad.interp
        H = np.asarray(uhat, dtype=float).reshape(-1, 2)
        g = self.image_gradients
        s = self.ctx.quad.weights * (g[:, 0] * (Q @ H[:, 0]) + g[:, 1] * (Q @ H[:, 1]))
        return self._back(s * g[:, 0], s * g[:, 1])

    def full_action(self, uhat) -> np.ndarray:
        """GN action plus the residual-weighted image-curvature term."""
        Q = self.ctx.quad.interp
        H = np.asarray(uhat, dtype=float).reshape(-1, 2)
        hq = np.column_stack([Q @ H[:, 0], Q @ H[:, 1]])
        curv = self.ctx.I1.hessian(self.deformed_points)
        w = self.ctx.quad.weights * self.residual
        c = w[:, None] * np.einsum("pij,pj->pi", curv, hq)
        return self.gn_action(uhat) + self._back(c[:, 0], c[:, 1])


def misfit_value(ctx: MisfitContext, u) -> float:
    return ctx.linearize(u).value


def misfit_gradient_u(ctx: MisfitContext, u) -> np.ndarray:
    return ctx.linearize(u).gradient


def misfit_gn_hessian_action(ctx: MisfitContext, u, uhat) -> np.ndarray:
    return ctx.linearize(u).gn_action(uhat)
