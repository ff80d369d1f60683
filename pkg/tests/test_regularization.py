import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from idic import fem
from idic.mesh import build_unit_square_mesh
from idic.regularization import (RegConfig, Regularization, TvDualState, max_feasible_step, reg_gradient,
                                 reg_hessian_action, reg_value, tv_dual_step)


@pytest.fixture(scope="module")
def mesh():
    return build_unit_square_mesh(6)


def test_config_validation():
    with pytest.raises(ValueError):
        RegConfig()
    with pytest.raises(ValueError):
        RegConfig(gamma_l2=-1.0, gamma_h1=1.0)
    with pytest.raises(ValueError):
        RegConfig(gamma_tv=1.0, eps_tv=0.0)
    with pytest.raises(ValueError):
        RegConfig(gamma_tv=1.0, tv_mode="dual")
    assert RegConfig(gamma_tv=1.0).uses_tv and RegConfig(gamma_h1=1.0).is_quadratic


def test_constant_at_reference(mesh):
    m = np.full(mesh.num_vertices, 1.3)
    eps = 0.04
    assert reg_value(RegConfig(gamma_l2=2.0, m_ref=1.3), mesh, m) == pytest.approx(0.0, abs=1e-14)
    assert reg_value(RegConfig(gamma_h1=2.0), mesh, m) == pytest.approx(0.0, abs=1e-13)
    assert reg_value(RegConfig(gamma_tv=3.0, eps_tv=eps), mesh, m) == pytest.approx(3.0 * np.sqrt(eps), rel=1e-12)
    for cfg in (RegConfig(gamma_l2=2.0, m_ref=1.3), RegConfig(gamma_h1=2.0), RegConfig(gamma_tv=3.0)):
        assert np.abs(reg_gradient(cfg, mesh, m)).max() < 1e-12


def test_linear_field_values(mesh):
    c = 1.7
    m = c * mesh.vertices[:, 0]
    assert reg_value(RegConfig(gamma_h1=0.4), mesh, m) == pytest.approx(0.2 * c * c, rel=1e-12)
    assert reg_value(RegConfig(gamma_tv=0.5, eps_tv=1e-12), mesh, m) == pytest.approx(0.5 * c, rel=1e-9)


def test_tv_converges_to_seminorm():
    # ramp across one column of cells: exact TV = jump height
    mesh = build_unit_square_mesh(10)
    x = mesh.vertices[:, 0]
    m = np.clip((x - 0.5) * 10, 0, 1) * 2.0
    errs = [abs(reg_value(RegConfig(gamma_tv=1.0, eps_tv=e), mesh, m) - 2.0) for e in (1e-2, 1e-4, 1e-6)]
    # the flat part contributes sqrt(eps) * area, so the error falls 10x per step
    assert errs[0] > errs[1] > errs[2] and errs[2] < 1e-3
    assert errs[1] / errs[2] == pytest.approx(10.0, rel=0.05)


def test_h1_gradient_shift_invariant(mesh, rng):
    m = rng.standard_normal(mesh.num_vertices)
    cfg = RegConfig(gamma_h1=0.3)
    assert np.allclose(reg_gradient(cfg, mesh, m), reg_gradient(cfg, mesh, m + 5.0), atol=1e-12)


@pytest.mark.parametrize("cfg", [RegConfig(gamma_l2=0.7, m_ref=0.4), RegConfig(gamma_h1=0.3),
                                 RegConfig(gamma_tv=0.9, eps_tv=0.05),
                                 RegConfig(gamma_l2=0.1, gamma_h1=0.2, gamma_tv=0.3)])
def test_gradient_fd(mesh, rng, cfg):
    m = rng.standard_normal(mesh.num_vertices)
    g = reg_gradient(cfg, mesh, m)
    for _ in range(5):
        d = rng.standard_normal(m.size)
        h = 1e-6
        fd = (reg_value(cfg, mesh, m + h * d) - reg_value(cfg, mesh, m - h * d)) / (2 * h)
        assert abs(fd - g @ d) <= 1e-6 * max(abs(fd), 1e-12)


def test_l2_action_is_mass(mesh, rng):
    mh = rng.standard_normal(mesh.num_vertices)
    out = reg_hessian_action(RegConfig(gamma_l2=0.25), mesh, rng.standard_normal(mesh.num_vertices), None, mh)
    assert np.allclose(out, 0.25 * (fem.assemble_mass_matrix(mesh) @ mh), rtol=1e-14, atol=1e-15)


def test_primal_tv_hessian_fd(mesh, rng):
    cfg = RegConfig(gamma_tv=1.0, eps_tv=0.05, tv_mode="primal")
    m = rng.standard_normal(mesh.num_vertices)
    mh = rng.standard_normal(m.size)
    h = 1e-6
    fd = (reg_gradient(cfg, mesh, m + h * mh) - reg_gradient(cfg, mesh, m - h * mh)) / (2 * h)
    H = reg_hessian_action(cfg, mesh, m, None, mh)
    assert np.linalg.norm(fd - H) <= 1e-5 * np.linalg.norm(fd)


def test_primal_dual_reduces_to_primal(mesh, rng):
    m = rng.standard_normal(mesh.num_vertices)
    mh = rng.standard_normal(m.size)
    reg = Regularization(RegConfig(gamma_tv=1.0, eps_tv=0.05), mesh)
    prim = Regularization(RegConfig(gamma_tv=1.0, eps_tv=0.05, tv_mode="primal"), mesh)
    a = reg.hessian_action(m, reg.initial_dual(m), mh)
    assert np.allclose(a, prim.hessian_action(m, None, mh), rtol=1e-12, atol=1e-13)


def test_primal_dual_requires_dual(mesh):
    reg = Regularization(RegConfig(gamma_tv=1.0), mesh)
    with pytest.raises(ValueError):
        reg.hessian_action(np.zeros(mesh.num_vertices), None, np.zeros(mesh.num_vertices))


def test_primal_dual_symmetric(mesh, rng):
    reg = Regularization(RegConfig(gamma_tv=1.0, eps_tv=0.02), mesh)
    m = rng.standard_normal(mesh.num_vertices)
    w = rng.standard_normal((mesh.num_cells, 2))
    w /= np.maximum(1.0, np.linalg.norm(w, axis=1))[:, None]
    dual = TvDualState(w)
    for _ in range(5):
        a, b = rng.standard_normal(m.size), rng.standard_normal(m.size)
        ab, ba = b @ reg.hessian_action(m, dual, a), a @ reg.hessian_action(m, dual, b)
        assert abs(ab - ba) <= 1e-10 * abs(ab)


def test_dual_fixed_point(mesh, rng):
    m = rng.standard_normal(mesh.num_vertices)
    reg = Regularization(RegConfig(gamma_tv=1.0, eps_tv=0.03), mesh)
    w0 = reg.initial_dual(m)
    w1, _ = tv_dual_step(mesh, m, w0, 0.03, dm=np.zeros_like(m))
    assert np.allclose(w1.w, w0.w, atol=1e-15)


def test_dual_unit_gradient_example():
    mesh = build_unit_square_mesh(3)
    m = mesh.vertices[:, 0]  # |grad m| = 1 on every cell
    w, alpha = tv_dual_step(mesh, m, TvDualState(np.zeros((mesh.num_cells, 2))), 1.0)
    assert alpha == 1.0
    assert np.allclose(w.w, np.array([1.0, 0.0]) / np.sqrt(2.0), atol=1e-14)


def test_max_feasible_step():
    w = np.array([[0.0, 0.0], [0.5, 0.0]])
    dw = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert max_feasible_step(w, dw) == pytest.approx(0.5)
    assert max_feasible_step(w, 0 * dw) == np.inf


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100.0), eps=st.sampled_from([1e-4, 1e-2, 1.0]))
def test_dual_feasible_always(seed, scale, eps):
    mesh = build_unit_square_mesh(4)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((mesh.num_cells, 2))
    # strictly feasible start, as the optimizer's iterates always are
    w *= 0.999 / np.maximum(1.0, np.linalg.norm(w, axis=1))[:, None]
    m = scale * rng.standard_normal(mesh.num_vertices)
    dm = scale * rng.standard_normal(mesh.num_vertices)
    out, alpha = tv_dual_step(mesh, m, TvDualState(w), eps, dm)
    assert 0 < alpha <= 1
    assert np.linalg.norm(out.w, axis=1).max() <= 1 + 1e-12
