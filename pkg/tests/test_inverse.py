import numpy as np
import pytest

from _oracles import dense_gn_hessian, fd_gradient_errors
from idic.imaging import sine_image
from idic.inverse import (HISTORY_COLUMNS, Experiment, InverseProblem, SolverOptions, eisenstat_walker_tol,
                          gn_hessian_action, read_history_csv, reduced_cost, reduced_gradient, solve_inverse,
                          write_history_csv)
from idic.materials import TractionSpec
from idic.mesh import build_unit_square_mesh
from idic.regularization import RegConfig


def _exp(t=(0.2, 0.02), shift=(0.01, 0.0)):
    return Experiment(TractionSpec(*t), sine_image(), sine_image(shift=shift))


def _m(mesh, rng, base=2.0):
    return base + 0.3 * rng.standard_normal(mesh.num_vertices)


def test_rtol_examples():
    assert eisenstat_walker_tol(0.09, 1.0) == pytest.approx(0.3)
    assert eisenstat_walker_tol(0.25, 1.0) == 0.5
    assert eisenstat_walker_tol(0.8, 1.0) == 0.5
    assert eisenstat_walker_tol(0.0, 1.0) == 0.0


def test_problem_validation(mesh4):
    with pytest.raises(ValueError):
        InverseProblem(mesh4, [], RegConfig(gamma_h1=1.0))
    with pytest.raises(ValueError):
        InverseProblem(mesh4, [_exp()], RegConfig(gamma_h1=1.0), m0=np.zeros(3))


def test_identical_experiments_average(mesh4, rng):
    reg = RegConfig(gamma_h1=1e-3)
    one = InverseProblem(mesh4, [_exp()], reg)
    two = InverseProblem(mesh4, [_exp(), _exp()], reg)
    m = _m(mesh4, rng)
    c1, phi1, r1 = reduced_cost(one, m)
    c2, phi2, r2 = reduced_cost(two, m)
    assert c2 == pytest.approx(c1, rel=1e-13) and phi2 == pytest.approx([phi1[0]] * 2)
    assert np.allclose(reduced_gradient(two, m), reduced_gradient(one, m), rtol=1e-12, atol=1e-15)


def test_cost_decomposition(mesh4, rng):
    prob = InverseProblem(mesh4, [_exp(), _exp((0.1, -0.05), (0.0, 0.01))], RegConfig(gamma_l2=1e-3, gamma_tv=1e-3))
    c, phis, r = reduced_cost(prob, _m(mesh4, rng))
    assert c - r - np.mean(phis) == 0.0


def test_m_ref_defaults_to_initial_guess(mesh4):
    prob = InverseProblem(mesh4, [_exp()], RegConfig(gamma_l2=1.0), m0=1.5)
    assert np.all(prob.reg_config.m_ref == 1.5)
    assert prob.reg.value(np.full(mesh4.num_vertices, 1.5)) == 0.0


def test_zero_traction_identical_images(mesh4, rng):
    img = sine_image()
    prob = InverseProblem(mesh4, [Experiment(TractionSpec(), img, img)], RegConfig(gamma_h1=1e-3))
    st = prob.evaluate(_m(mesh4, rng))
    assert st.misfit == 0.0
    assert np.allclose(st.states[0].gradient(), 0.0, atol=1e-15)


@pytest.mark.parametrize("model,t", [("linear", (0.2, 0.02)), ("neo_hookean", (0.5, 0.05))])
@pytest.mark.parametrize("reg", [RegConfig(gamma_h1=1e-3), RegConfig(gamma_l2=1e-3, gamma_tv=1e-3),
                                 RegConfig(gamma_l2=1e-4, gamma_h1=1e-4, gamma_tv=1e-3, tv_mode="primal")])
def test_gradient_fd(mesh4, rng, model, t, reg):
    prob = InverseProblem(mesh4, [_exp(t)], reg, model=model)
    assert max(fd_gradient_errors(prob, _m(mesh4, rng), rng, ndir=4)) <= 1e-5


@pytest.mark.parametrize("model", ["linear", "neo_hookean"])
def test_gn_matches_dense_oracle(mesh4, rng, model):
    prob = InverseProblem(mesh4, [_exp((0.3, 0.05)), _exp((-0.1, 0.0), (0.0, 0.01))],
                          RegConfig(gamma_h1=1e-4, gamma_l2=1e-5), model=model)
    m = _m(mesh4, rng)
    Hd = dense_gn_hessian(prob, m)
    st = prob.evaluate(m)
    Hm = np.column_stack([gn_hessian_action(prob, m, e, state=st) for e in np.eye(m.size)])
    assert np.abs(Hm - Hd).max() <= 1e-8 * np.abs(Hd).max()


def test_gn_symmetric_psd(mesh4, rng):
    prob = InverseProblem(mesh4, [_exp()], RegConfig(gamma_l2=1e-3, gamma_tv=1e-3), model="neo_hookean")
    m = _m(mesh4, rng)
    st = prob.evaluate(m)
    for _ in range(10):
        a, b = rng.standard_normal(m.size), rng.standard_normal(m.size)
        ab = b @ gn_hessian_action(prob, m, a, st)
        ba = a @ gn_hessian_action(prob, m, b, st)
        assert abs(ab - ba) <= 1e-8 * abs(ab)
        assert a @ st.misfit_hessian_action(a) >= 0


def test_full_newton_matches_fd(mesh4, rng):
    prob = InverseProblem(mesh4, [_exp((0.5, 0.05))], RegConfig(gamma_h1=1e-3), model="neo_hookean",
                          options=SolverOptions(full_newton=True))
    m = _m(mesh4, rng)
    mh = rng.standard_normal(m.size)
    h = 1e-6
    fd = (reduced_gradient(prob, m + h * mh) - reduced_gradient(prob, m - h * mh)) / (2 * h)
    H = gn_hessian_action(prob, m, mh)
    assert np.linalg.norm(H - fd) <= 1e-6 * np.linalg.norm(fd)


def _small_problem(mesh, **opts):
    return InverseProblem(mesh, [_exp((0.2, 0.02), (0.015, 0.005))], RegConfig(gamma_h1=1e-3),
                          options=SolverOptions(**opts))


def test_solver_monotone_and_converges(mesh4, tmp_path):
    prob = _small_problem(mesh4, g_tol=1e-6, history_path=str(tmp_path / "h.csv"),
                          checkpoint_every=2, checkpoint_dir=str(tmp_path / "ck"))
    res = solve_inverse(prob)
    costs = [r.cost for r in res.history]
    assert res.status == "converged"
    assert all(b < a for a, b in zip(costs, costs[1:]))
    assert res.history[-1].grad_norm <= 1e-6 * res.history[0].grad_norm
    back = read_history_csv(tmp_path / "h.csv")
    assert [r.cost for r in back] == costs
    assert (tmp_path / "ck" / "m_0000.csv").exists() and (tmp_path / "ck" / "m_0002.csv").exists()
    assert open(tmp_path / "h.csv").readline().strip().split(",") == HISTORY_COLUMNS


def test_restart_at_solution(mesh4):
    # full Newton converges fast enough to push the gradient to round-off level
    first = solve_inverse(_small_problem(mesh4, g_tol=1e-10, full_newton=True))
    assert first.status == "converged"
    assert first.history[-1].grad_norm <= 1e-8 * first.history[0].grad_norm
    again = solve_inverse(_small_problem(mesh4, g_tol=1e-6), m_init=first.m)
    assert again.iterations <= 2


def test_exact_stationary_start(mesh4):
    img = sine_image()
    prob = InverseProblem(mesh4, [Experiment(TractionSpec(), img, img)], RegConfig(gamma_h1=1e-3))
    res = solve_inverse(prob)
    assert res.status == "converged" and res.iterations == 0


def test_tv_dual_feasible_and_history(mesh4):
    prob = InverseProblem(mesh4, [_exp((0.2, 0.02), (0.015, 0.0))], RegConfig(gamma_l2=1e-4, gamma_tv=1e-3),
                          options=SolverOptions(max_iter=8))
    res = solve_inverse(prob)
    assert res.dual is not None
    assert all(r.dual_max <= 1 + 1e-12 for r in res.history)
    costs = [r.cost for r in res.history]
    assert all(b <= a for a, b in zip(costs, costs[1:]))


def test_rel_cost_target(mesh4):
    prob = _small_problem(mesh4, rel_cost_target=0.9)
    res = solve_inverse(prob)
    assert res.status == "target_reached" and res.history[-1].rel_cost <= 0.9


def test_history_roundtrip(tmp_path):
    from idic.inverse import IterateRecord

    recs = [IterateRecord(0, 1.5, 1.0, 1.2, 0.3, 0.1, 0, 0.0, float("nan")),
            IterateRecord(1, 1.0 / 3, 0.2, 0.3, 0.03, 1e-3, 7, 0.5, 0.5, 0.9)]
    write_history_csv(tmp_path / "h.csv", recs)
    back = read_history_csv(tmp_path / "h.csv")
    assert back[1] == recs[1] and back[0].k == 0 and np.isnan(back[0].r_tol)
