"""Forward elasticity solves ``u = u(m, t)`` and linearized (tangent) solves."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .fem import SolverError
from .materials import InvertedElementError, ResidualForm, TractionSpec

log = logging.getLogger(__name__)


@dataclass
class ForwardSolveReport:
    iterations: int
    final_residual_norm: float
    converged: bool
    residual_history: list[float] = field(default_factory=list)
    load_steps: int = 1


class ForwardSolveError(SolverError):
    def __init__(self, message, report: ForwardSolveReport | None = None):
        super().__init__(message, report.final_residual_norm if report else float("nan"),
                         report.iterations if report else -1)
        self.report = report


class TangentSolver:
    """Factorized tangent ``d_u r`` at a fixed state with the clamp eliminated.

    The tangent is symmetric, so the same factorization serves forward
    (incremental) and adjoint solves.
    """

    def __init__(self, form: ResidualForm, u, m):
        self.form = form
        K = form.tangent(u, m)
        self.K = K
        A, _ = fem.apply_dirichlet(K, None, form.fixed_dofs)
        self._fact = fem.Factorization(A)
        self._fixed = form.fixed_dofs

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        b = np.array(rhs, dtype=float, copy=True)
        b[self._fixed] = 0.0
        x = self._fact.solve(b)
        x[self._fixed] = 0.0
        return x


def _free_norm(form: ResidualForm, r: np.ndarray) -> float:
    r = r.copy()
    r[form.fixed_dofs] = 0.0
    return float(np.linalg.norm(r))


def solve_forward(form: ResidualForm, m, t: TractionSpec, tol: float = 1e-10, *,
                  u0=None, extra_load=None, max_iter: int = 50, max_load_steps: int = 16):
    """Solve ``r(u, m, t, v) = 0`` for all admissible ``v``.

    Returns the flat displacement DOF vector and a report.  ``tol`` is relative
    to the norm of the applied load.  The hyperelastic path runs Newton with a
    backtracking line search and falls back to load stepping (2, 4, ... up to
    ``max_load_steps`` increments) if the full load fails.
    """
    m = np.asarray(getattr(m, "values", m), dtype=float)
    if not tol > 0:
        raise ValueError("tol must be positive")
    f = form.traction_vector(t)
    if extra_load is not None:
        f = f + extra_load
    fnorm = _free_norm(form, f)
    if form.is_linear:
        return _solve_linear(form, m, t, tol, extra_load, fnorm)

    start = np.zeros(form.ndof) if u0 is None else np.asarray(u0, dtype=float).ravel().copy()
    start[form.fixed_dofs] = 0.0
    steps = 1
    last_err = None
    while steps <= max_load_steps:
        try:
            u = start.copy() if steps == 1 else np.zeros(form.ndof)
            total_iters = 0
            history: list[float] = []
            for s in range(1, steps + 1):
                frac = s / steps
                el = None if extra_load is None else frac * extra_load
                u, rep = _newton(form, m, t.scaled(frac), el, u, tol * fnorm if s == steps else
                                 max(tol, 1e-6) * fnorm, max_iter)
                total_iters += rep.iterations
                history.extend(rep.residual_history)
            rep = ForwardSolveReport(total_iters, history[-1], True, history, steps)
            return u, rep
        except (ForwardSolveError, InvertedElementError) as exc:
            last_err = exc
            steps *= 2
            log.debug("forward Newton failed (%s); retrying with %d load steps", exc, steps)
    report = getattr(last_err, "report", None)
    raise ForwardSolveError(f"hyperelastic forward solve failed: {last_err}", report)


def _solve_linear(form, m, t, tol, extra_load, fnorm):
    if fnorm == 0.0:
        u = np.zeros(form.ndof)
        return u, ForwardSolveReport(0, 0.0, True, [0.0])
    solver = TangentSolver(form, np.zeros(form.ndof), m)
    u = solver.solve(-form.residual_vector(np.zeros(form.ndof), m, t, extra_load))
    res = _free_norm(form, form.residual_vector(u, m, t, extra_load))
    ok = res <= tol * fnorm
    rep = ForwardSolveReport(1, res / fnorm, ok, [1.0, res / fnorm])
    if not ok:
        raise ForwardSolveError(f"linear solve residual {res / fnorm:.3e} above tolerance {tol:.1e}", rep)
    return u, rep


def _newton(form, m, t, extra_load, u, abs_tol, max_iter, c_armijo=1e-4):
    r = form.residual_vector(u, m, t, extra_load)
    rnorm = _free_norm(form, r)
    scale = max(rnorm, 1e-300)
    history = [rnorm]
    for k in range(max_iter):
        if rnorm <= abs_tol:
            return u, ForwardSolveReport(k, rnorm, True, history)
        du = TangentSolver(form, u, m).solve(-r)
        alpha = 1.0
        while True:
            trial = u + alpha * du
            try:
                form.check_admissible(trial)
                r_trial = form.residual_vector(trial, m, t, extra_load)
                n_trial = _free_norm(form, r_trial)
                if n_trial <= (1 - c_armijo * alpha) * rnorm:
                    break
            except InvertedElementError:
                pass
            alpha *= 0.5
            if alpha < 1e-8:
                rep = ForwardSolveReport(k, rnorm, False, history)
                raise ForwardSolveError("line search failed (inverted elements or no decrease)", rep)
        u, r, rnorm = trial, r_trial, n_trial
        history.append(rnorm)
    if rnorm <= abs_tol:
        return u, ForwardSolveReport(max_iter, rnorm, True, history)
    rep = ForwardSolveReport(max_iter, rnorm, False, history)
    raise ForwardSolveError(f"Newton did not converge in {max_iter} iterations "
                            f"(residual {rnorm / scale:.3e} of initial)", rep)


def solve_linearized(form: ResidualForm, u, m, rhs, tol: float = 1e-10) -> np.ndarray:
    """Solve ``<d_u r(u, m) x, v> = <rhs, v>`` on the free DOFs."""
    rhs = np.asarray(rhs, dtype=float).ravel()
    solver = TangentSolver(form, u, m)
    x = solver.solve(rhs)
    b = rhs.copy()
    b[form.fixed_dofs] = 0.0
    res = _free_norm(form, solver.K @ x - b)
    bn = np.linalg.norm(b)
    if bn > 0 and res > max(tol, 1e-8) * bn:
        raise SolverError(f"tangent solve residual {res / bn:.3e}; tangent may be singular", res)
    return x
