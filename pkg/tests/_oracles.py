"""Reference computations shared by unit and acceptance tests."""

import numpy as np

from idic import fem
from idic.forward import solve_forward
from idic.materials import ResidualForm, TractionSpec, lame_factors
from idic.mesh import build_unit_square_mesh

NU = 0.35


def mms_exact(x, y):
    ux = 0.01 * np.sin(0.5 * np.pi * x) * np.cos(np.pi * y)
    uy = 0.01 * x**2 * np.exp(y)
    return ux, uy


def mms_grad(x, y):
    """(npts, 2, 2) gradient of the manufactured displacement."""
    G = np.empty(x.shape + (2, 2))
    G[..., 0, 0] = 0.005 * np.pi * np.cos(0.5 * np.pi * x) * np.cos(np.pi * y)
    G[..., 0, 1] = -0.01 * np.pi * np.sin(0.5 * np.pi * x) * np.sin(np.pi * y)
    G[..., 1, 0] = 0.02 * x * np.exp(y)
    G[..., 1, 1] = 0.01 * x**2 * np.exp(y)
    return G


def mms_load(mesh, nu=NU, subdivisions=4):
    """Consistent load ``b_i = int sigma(u_ex) : eps(phi_i) dx`` for E = 1.

    Integrating by parts, this equals the body force plus boundary traction of
    the manufactured solution tested against each basis function.
    """
    lam, mu = lame_factors(nu)
    q = fem.cell_quadrature(mesh, subdivisions)
    G = mms_grad(q.points[:, 0], q.points[:, 1])
    eps = 0.5 * (G + np.swapaxes(G, 1, 2))
    sig = lam * np.trace(eps, axis1=1, axis2=2)[:, None, None] * np.eye(2) + 2 * mu * eps
    S = (q.weights[:, None, None] * sig).reshape(mesh.num_cells, -1, 2, 2).sum(axis=1)
    local = np.einsum("ciJ,caJ->cai", S, mesh.basis_gradients)
    return fem.vector_scatter(mesh) @ local.ravel()


def mms_l2_error(n, nu=NU):
    mesh = build_unit_square_mesh(n)
    form = ResidualForm(mesh, "linear", nu)
    m = np.zeros(mesh.num_vertices)
    u, _ = solve_forward(form, m, TractionSpec(), extra_load=mms_load(mesh, nu))
    q = fem.cell_quadrature(mesh, 3)
    uh = q.interp @ u.reshape(-1, 2)
    ex = np.column_stack(mms_exact(q.points[:, 0], q.points[:, 1]))
    return float(np.sqrt(np.sum(q.weights * np.sum((uh - ex) ** 2, axis=1))))


def mms_orders(ns=(16, 32, 64)):
    errs = [mms_l2_error(n) for n in ns]
    return errs, [np.log2(errs[i] / errs[i + 1]) for i in range(len(errs) - 1)]


def newton_quadratic_ratios(n=16, target_strain=0.05):
    """Residual history of a neo-Hookean solve near the target mean strain."""
    from idic.synth import mean_axial_strain

    mesh = build_unit_square_mesh(n)
    form = ResidualForm(mesh, "neo_hookean", NU)
    m = np.full(mesh.num_vertices, 2.0)
    # a small-strain guess of the load undershoots; 1.14 was calibrated once
    t = 1.14 * target_strain * np.exp(2.0)
    u, rep = solve_forward(form, m, TractionSpec(t, 0.0), tol=1e-12)
    # drop entries at the round-off floor, where no rate can be measured
    h = [r for r in rep.residual_history if r > 1e-12 * rep.residual_history[0]]
    ratios = [h[k + 1] / h[k] ** 2 for k in range(len(h) - 1)]
    return mean_axial_strain(mesh, u), h, ratios


def dense_gevp(H, B, r):
    """Dominant ``r`` eigenvalues of ``H x = lam B x`` by Cholesky reduction."""
    L = np.linalg.cholesky(B)
    Li = np.linalg.inv(L)
    A = Li @ H @ Li.T
    lam = np.linalg.eigvalsh(0.5 * (A + A.T))[::-1]
    return lam[:r]


def dense_gn_hessian(prob, m):
    """Straight-line dense Gauss-Newton Hessian of the reduced cost.

    Builds ``J = -K^{-1} B`` with dense linear algebra on the free DOFs and the
    misfit GN matrix directly from image gradients at the quadrature points,
    then returns ``mean_i J_i^T H_i J_i + R''``.  Shares only the residual
    form and quadrature with the matrix-free code.
    """
    from idic.forward import solve_forward

    form = prob.form
    nm = prob.mesh.num_vertices
    free = np.setdiff1d(np.arange(form.ndof), form.fixed_dofs)
    H = np.zeros((nm, nm))
    for exp, ctx in zip(prob.experiments, prob.contexts):
        u, _ = solve_forward(form, m, exp.traction, 1e-12)
        K = form.tangent(u, m).toarray()[np.ix_(free, free)]
        B = np.column_stack([form.dm_action(u, m, e)[free] for e in np.eye(nm)])
        J = np.zeros((form.ndof, nm))
        J[free] = -np.linalg.solve(K, B)
        q = ctx.quad
        U = u.reshape(-1, 2)
        pts = q.points + np.column_stack([q.interp @ U[:, 0], q.interp @ U[:, 1]])
        _, grad = ctx.I1.value_and_gradient(pts)
        Q = q.interp.toarray()
        # rows: d(grad I . u_q)/d(dofs), interleaved x/y
        G = np.zeros((len(q.weights), form.ndof))
        G[:, 0::2] = grad[:, [0]] * Q
        G[:, 1::2] = grad[:, [1]] * Q
        Hu = G.T @ (q.weights[:, None] * G)
        H += J.T @ Hu @ J
    H /= prob.num_experiments
    dual = None
    if prob.reg_config.uses_tv and prob.reg_config.tv_mode == "primal_dual":
        dual = prob.reg.initial_dual(m)
    return H + prob.reg.hessian_matrix(m, dual).toarray()


def fd_gradient_errors(prob, m, rng, ndir=10, h=1e-5):
    st = prob.evaluate(m)
    g = st.gradient
    errs = []
    for _ in range(ndir):
        d = rng.standard_normal(m.size)
        fd = (prob.evaluate(m + h * d).cost - prob.evaluate(m - h * d).cost) / (2 * h)
        errs.append(abs(fd - g @ d) / abs(fd))
    return errs
