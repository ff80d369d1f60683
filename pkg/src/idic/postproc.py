"""Strain and von Mises stress from (m, u), nodal projection, and field errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .materials import DEFAULT_POISSON, cell_modulus, lame_factors
from .mesh import Mesh


@dataclass
class TensorCellField:
    """Symmetric 2x2 tensor per cell, with an optional out-of-plane (zz) component."""

    mesh: Mesh
    values: np.ndarray  # (ncell, 2, 2)
    zz: np.ndarray | None = None

    def full(self) -> np.ndarray:
        """(ncell, 3, 3) tensors with the zz entry filled in (zero if absent)."""
        out = np.zeros((self.values.shape[0], 3, 3))
        out[:, :2, :2] = self.values
        if self.zz is not None:
            out[:, 2, 2] = self.zz
        return out


def compute_strain(mesh: Mesh, u) -> TensorCellField:
    G = fem.cell_displacement_gradient(mesh, np.asarray(getattr(u, "values", u), dtype=float))
    return TensorCellField(mesh, 0.5 * (G + np.swapaxes(G, 1, 2)))


def compute_stress(mesh: Mesh, u, m, nu: float = DEFAULT_POISSON) -> TensorCellField:
    """Linear-elastic plane-strain stress, ``sigma_zz = nu (sigma_xx + sigma_yy)``."""
    eps = compute_strain(mesh, u).values
    lam, mu = lame_factors(nu)
    E = cell_modulus(mesh, np.asarray(getattr(m, "values", m), dtype=float))
    tr = eps[:, 0, 0] + eps[:, 1, 1]
    sig = E[:, None, None] * (lam * tr[:, None, None] * np.eye(2) + 2 * mu * eps)
    return TensorCellField(mesh, sig, nu * (sig[:, 0, 0] + sig[:, 1, 1]))


def von_mises(sigma3: np.ndarray) -> np.ndarray:
    """``sqrt(3/2 s:s)`` with ``s`` the deviator of a (..., 3, 3) stress."""
    s = np.asarray(sigma3, dtype=float)
    dev = s - np.trace(s, axis1=-2, axis2=-1)[..., None, None] / 3.0 * np.eye(3)
    return np.sqrt(1.5 * np.sum(dev * dev, axis=(-2, -1)))


def compute_von_mises(mesh: Mesh, u, m, nu: float = DEFAULT_POISSON) -> np.ndarray:
    """Cellwise von Mises stress of the linear-elastic state."""
    return von_mises(compute_stress(mesh, u, m, nu).full())


def project_to_nodes(mesh: Mesh, cell_values) -> np.ndarray:
    """Mass-lumped L2 projection of DG0 data onto P1 (trailing dims preserved)."""
    v = np.asarray(cell_values, dtype=float)
    flat = v.reshape(mesh.num_cells, -1)
    w = mesh.areas / 3.0
    num = np.zeros((mesh.num_vertices, flat.shape[1]))
    den = np.zeros(mesh.num_vertices)
    for a in range(3):
        idx = mesh.triangles[:, a]
        np.add.at(num, idx, w[:, None] * flat)
        np.add.at(den, idx, w)
    return (num / den[:, None]).reshape((mesh.num_vertices,) + v.shape[1:])


def l2_norm(mesh: Mesh, f) -> float:
    f = np.asarray(f, dtype=float)
    return float(np.sqrt(max(f @ (fem.assemble_mass_matrix(mesh) @ f), 0.0)))


def relative_field_error(mesh: Mesh, m_true, m_infer) -> float:
    """``||m_true - m_infer|| / ||m_true||`` in L2(Omega)."""
    m_true = np.asarray(getattr(m_true, "values", m_true), dtype=float)
    m_infer = np.asarray(getattr(m_infer, "values", m_infer), dtype=float)
    denom = l2_norm(mesh, m_true)
    if denom == 0.0:
        raise ValueError("reference field has zero norm")
    return l2_norm(mesh, m_true - m_infer) / denom


def feature_contrast(m_true, m_infer, background: float) -> float:
    """Mean of ``m_infer`` off the features minus its mean on them.

    Features are the nodes where ``m_true`` differs from ``background``.
    """
    m_true = np.asarray(m_true, dtype=float)
    m_infer = np.asarray(m_infer, dtype=float)
    feat = np.abs(m_true - background) > 1e-12
    if not feat.any() or feat.all():
        raise ValueError("need both feature and background nodes")
    return float(m_infer[~feat].mean() - m_infer[feat].mean())
