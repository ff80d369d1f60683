"""Reduced-space inverse solver: adjoint gradients, Gauss-Newton Hessian actions
and an inexact Newton-CG loop with Armijo backtracking.

All derivative vectors are assembled duals over the P1 parameter space.  The
Newton system is solved by preconditioned CG with the regularization Hessian as
preconditioner; gradient norms are measured in the mass-matrix dual norm.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import fem
from .fem import SolverError
from .forward import ForwardSolveError, TangentSolver, solve_forward
from .materials import (DEFAULT_POISSON, InvertedElementError, ResidualForm, TractionSpec,
                        cell_modulus_jacobian)
from .mesh import Mesh, OutOfDomainError
from .misfit import MisfitContext
from .regularization import Regularization, RegConfig, TvDualState, tv_dual_step

log = logging.getLogger(__name__)


@dataclass
class Experiment:
    traction: TractionSpec
    I0: object
    I1: object
    name: str = ""


@dataclass
class SolverOptions:
    g_tol: float = 1e-6
    max_iter: int = 100
    c_armijo: float = 1e-4
    max_backtrack: int = 30
    cg_max_iter: int = 200
    forward_tol: float = 1e-10
    full_newton: bool = False
    history_path: str | None = None
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    # optional extra stop once J_k / J_0 drops below this value
    rel_cost_target: float | None = None


@dataclass
class IterateRecord:
    k: int
    cost: float
    rel_cost: float
    misfit: float
    reg: float
    grad_norm: float
    cg_iters: int
    step: float
    r_tol: float
    dual_max: float = float("nan")


HISTORY_COLUMNS = [f.name for f in fields(IterateRecord)]


class InverseSolveError(SolverError):
    pass


class InverseProblem:
    """Experiments sharing one mesh, an elasticity model and a regularizer."""

    def __init__(self, mesh: Mesh, experiments: Sequence[Experiment], reg: RegConfig,
                 model: str = "linear", nu: float = DEFAULT_POISSON, m0=2.0,
                 options: SolverOptions | None = None, misfit_subdivisions: int = 1):
        if len(experiments) < 1:
            raise ValueError("an inverse problem needs at least one experiment")
        self.mesh = mesh
        self.experiments = list(experiments)
        self.form = ResidualForm(mesh, model, nu)
        m0 = np.asarray(m0, dtype=float)
        self.m0 = np.full(mesh.num_vertices, float(m0)) if m0.ndim == 0 else m0.copy()
        if self.m0.shape != (mesh.num_vertices,):
            raise ValueError("initial guess has the wrong length")
        if reg.m_ref is None:
            reg = RegConfig(reg.gamma_l2, reg.gamma_h1, reg.gamma_tv, reg.eps_tv, self.m0.copy(), reg.tv_mode)
        self.reg_config = reg
        self.reg = Regularization(reg, mesh)
        self.options = options or SolverOptions()
        self.contexts = [MisfitContext(mesh, e.I0, e.I1, misfit_subdivisions) for e in self.experiments]
        self.loads = [self.form.traction_vector(e.traction) for e in self.experiments]

    @property
    def num_experiments(self) -> int:
        return len(self.experiments)

    def evaluate(self, m, warm: "ReducedState | None" = None) -> "ReducedState":
        return ReducedState(self, np.asarray(m, dtype=float).copy(), warm)


class _ExperimentState:
    """Forward state of one experiment at a fixed m, plus lazily built adjoint data."""

    def __init__(self, prob: InverseProblem, i: int, m: np.ndarray, u0=None):
        self.prob = prob
        self.form = prob.form
        exp = prob.experiments[i]
        try:
            self.u, self.report = solve_forward(self.form, m, exp.traction, prob.options.forward_tol, u0=u0)
        except (ForwardSolveError, InvertedElementError) as exc:
            raise ForwardSolveError(f"experiment {i}: {exc}", getattr(exc, "report", None)) from exc
        self.m = m
        self.misfit = prob.contexts[i].linearize(self.u)
        self.value = self.misfit.value
        self._solver = None
        self._p = None

    @property
    def solver(self) -> TangentSolver:
        if self._solver is None:
            self._solver = TangentSolver(self.form, self.u, self.m)
            f = self.form
            self._fl = f.unit_internal_local(self.u)
            self._dE = cell_modulus_jacobian(f.mesh, self.m)
        return self._solver

    @property
    def p(self) -> np.ndarray:
        if self._p is None:
            self._p = self.solver.solve(-self.misfit.gradient)
        return self._p

    def _dm_action(self, mhat):
        a = self._dE @ mhat
        return self.form._scatter(a[:, None] * self._fl)

    def _dm_adjoint(self, p):
        s = np.einsum("ck,ck->c", self._fl, self.form._local_dofs(p))
        return self._dE.T @ s

    def gradient(self) -> np.ndarray:
        p = self.p
        return self._dm_adjoint(p)

    def hessian_action(self, mhat, full_newton=False) -> np.ndarray:
        solver = self.solver
        f, u, m = self.form, self.u, self.m
        uhat = solver.solve(-self._dm_action(mhat))
        if full_newton:
            p = self.p
            rhs = self.misfit.full_action(uhat) + f.duu(u, m, p, uhat) + f.dmu(u, m, p, mhat)
        else:
            rhs = self.misfit.gn_action(uhat)
        phat = solver.solve(-rhs)
        out = self._dm_adjoint(phat)
        if full_newton:
            out = out + f.dum(u, m, self.p, uhat) + f.dmm(u, m, self.p, mhat)
        return out


class ReducedState:
    """Everything known at one parameter value: forward states, cost, gradient."""

    def __init__(self, prob: InverseProblem, m: np.ndarray, warm: "ReducedState | None" = None):
        self.prob = prob
        self.m = m
        self.states = []
        for i in range(prob.num_experiments):
            u0 = warm.states[i].u if warm is not None else None
            self.states.append(_ExperimentState(prob, i, m, u0))
        self.misfits = [s.value for s in self.states]
        self.misfit = float(np.mean(self.misfits))
        self.reg_value = prob.reg.value(m)
        self.cost = self.misfit + self.reg_value
        self._grad = None

    @property
    def gradient(self) -> np.ndarray:
        if self._grad is None:
            g = sum(s.gradient() for s in self.states) / len(self.states)
            self._grad = g + self.prob.reg.gradient(self.m)
        return self._grad

    def misfit_hessian_action(self, mhat, full_newton=False) -> np.ndarray:
        mhat = np.asarray(mhat, dtype=float)
        return sum(s.hessian_action(mhat, full_newton) for s in self.states) / len(self.states)

    def hessian_action(self, mhat, dual: TvDualState | None = None, full_newton=False) -> np.ndarray:
        reg_h = self.prob.reg.hessian_matrix(self.m, dual) @ np.asarray(mhat, dtype=float)
        return self.misfit_hessian_action(mhat, full_newton) + reg_h


# -- module-level API ------------------------------------------------------------

def reduced_cost(prob: InverseProblem, m) -> tuple[float, list[float], float]:
    st = prob.evaluate(m)
    return st.cost, list(st.misfits), st.reg_value


def reduced_gradient(prob: InverseProblem, m) -> np.ndarray:
    return prob.evaluate(m).gradient


def gn_hessian_action(prob: InverseProblem, m, mhat, state: ReducedState | None = None,
                      dual: TvDualState | None = None) -> np.ndarray:
    if state is None or state.m is not m and not np.array_equal(state.m, m):
        state = prob.evaluate(m)
    if dual is None and prob.reg_config.uses_tv and prob.reg_config.tv_mode == "primal_dual":
        dual = prob.reg.initial_dual(state.m)
    return state.hessian_action(mhat, dual, prob.options.full_newton)


def eisenstat_walker_tol(cost: float, cost0: float) -> float:
    if cost0 <= 0:
        return 0.5
    return min(0.5, math.sqrt(max(cost, 0.0) / cost0))


# -- Newton-CG ---------------------------------------------------------------------

@dataclass
class InverseResult:
    m: np.ndarray
    history: list[IterateRecord]
    dual: TvDualState | None
    status: str
    state: ReducedState = field(repr=False, default=None)

    @property
    def iterations(self) -> int:
        return len(self.history) - 1


def _preconditioner(prob: InverseProblem, m, dual):
    # Gradient-type terms leave constants (nearly) in the kernel; without a
    # mass term of comparable size the preconditioned residual is dominated by
    # the mean and CG stops long before the data-informed modes are resolved.
    c = prob.reg_config
    shift = max(c.gamma_h1, c.gamma_tv / math.sqrt(c.eps_tv) if c.gamma_tv else 0.0)
    P = prob.reg.hessian_matrix(m, dual) + shift * prob.reg.M
    return fem.Factorization(P)


def _pcg(apply_H, b, apply_Pinv, rtol, maxiter, norm=None):
    """Preconditioned CG with Steihaug-style exit on non-positive curvature.

    Stops when ``norm(r) <= rtol * norm(b)``; the default norm is the one
    induced by the preconditioner.
    """
    x = np.zeros_like(b)
    r = b.copy()
    z = apply_Pinv(r)
    d = z.copy()
    rz = float(r @ z)
    if rz <= 0:
        return x, 0
    r0 = norm(r) if norm else math.sqrt(rz)
    for it in range(1, maxiter + 1):
        Hd = apply_H(d)
        curv = float(d @ Hd)
        if curv <= 0:
            if it == 1:
                x = d
            log.debug("CG hit non-positive curvature at iteration %d", it)
            return x, it
        alpha = rz / curv
        x = x + alpha * d
        r = r - alpha * Hd
        z = apply_Pinv(r)
        rz_new = float(r @ z)
        rn = norm(r) if norm else math.sqrt(max(rz_new, 0.0))
        if rn <= rtol * r0:
            return x, it
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x, maxiter


def write_history_csv(path, history: Sequence[IterateRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(rec).values()])


def read_history_csv(path) -> list[IterateRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for f in fields(IterateRecord):
                vals[f.name] = int(row[f.name]) if f.type in (int, "int") else float(row[f.name])
            out.append(IterateRecord(**vals))
    return out


def solve_inverse(prob: InverseProblem, m_init=None,
                  callback: Callable[[IterateRecord, np.ndarray], None] | None = None) -> InverseResult:
    """Inexact Newton-CG on the reduced cost starting from ``m_init`` (default m0)."""
    opt = prob.options
    m = prob.m0.copy() if m_init is None else np.asarray(m_init, dtype=float).copy()
    cfg = prob.reg_config
    use_dual = cfg.uses_tv and cfg.tv_mode == "primal_dual"
    dual = prob.reg.initial_dual(m) if use_dual else None
    M_fact = fem.Factorization(prob.reg.M)

    def dual_norm(g):
        return math.sqrt(max(float(g @ M_fact.solve(g)), 0.0))

    state = prob.evaluate(m)
    g = state.gradient
    gnorm = dual_norm(g)
    # relative cost and gradient tolerances refer to the problem's initial
    # guess, so a warm start near the solution stops immediately
    if m_init is None:
        cost0, gnorm0 = state.cost, gnorm
    else:
        ref = prob.evaluate(prob.m0)
        cost0, gnorm0 = ref.cost, dual_norm(ref.gradient)
    history = [IterateRecord(0, state.cost, state.cost / cost0 if cost0 else 0.0, state.misfit,
                             state.reg_value, gnorm, 0, 0.0, float("nan"),
                             dual.max_norm if dual else float("nan"))]
    _emit(prob, history, m, callback)
    status = "max_iter"
    if gnorm <= opt.g_tol * gnorm0:
        status = "converged"
    for k in range(1, opt.max_iter + 1):
        if status == "converged":
            break
        r_tol = eisenstat_walker_tol(state.cost, cost0)
        pre = _preconditioner(prob, m, dual)
        H_reg = prob.reg.hessian_matrix(m, dual)

        def apply_H(v, st=state, Hr=H_reg):
            return st.misfit_hessian_action(v, opt.full_newton) + Hr @ v

        dm, cg_iters = _pcg(apply_H, -g, pre.solve, r_tol, opt.cg_max_iter, dual_norm)
        slope = float(g @ dm)
        if not slope < 0:
            dm = -pre.solve(g)
            slope = float(g @ dm)
        beta = 1.0
        accepted = None
        for _ in range(opt.max_backtrack + 1):
            trial = m + beta * dm
            try:
                cand = prob.evaluate(trial, warm=state)
                if cand.cost <= state.cost + opt.c_armijo * beta * slope:
                    accepted = cand
                    break
            except (ForwardSolveError, InvertedElementError, SolverError, OutOfDomainError) as exc:
                log.debug("forward failure at step %.3g: %s", beta, exc)
            beta *= 0.5
        if accepted is None:
            status = "line_search_failed"
            log.warning("line search failed at iteration %d", k)
            break
        if use_dual:
            dual, _ = tv_dual_step(prob.mesh, m, dual, cfg.eps_tv, beta * dm)
        m = accepted.m
        state = accepted
        g = state.gradient
        gnorm = dual_norm(g)
        rec = IterateRecord(k, state.cost, state.cost / cost0 if cost0 else 0.0, state.misfit,
                            state.reg_value, gnorm, cg_iters, beta, r_tol,
                            dual.max_norm if dual else float("nan"))
        history.append(rec)
        log.info("it %3d  cost %.6e  rel %.3e  |g| %.3e  cg %3d  step %.3g", k, rec.cost,
                 rec.rel_cost, gnorm, cg_iters, beta)
        _emit(prob, history, m, callback)
        if gnorm <= opt.g_tol * gnorm0:
            status = "converged"
        elif opt.rel_cost_target is not None and rec.rel_cost <= opt.rel_cost_target:
            status = "target_reached"
            break
    if opt.history_path:
        write_history_csv(opt.history_path, history)
    return InverseResult(m, history, dual, status, state)


def _emit(prob, history, m, callback):
    opt = prob.options
    rec = history[-1]
    if callback is not None:
        callback(rec, m)
    if opt.history_path:
        write_history_csv(opt.history_path, history)
    if opt.checkpoint_every and opt.checkpoint_dir and rec.k % opt.checkpoint_every == 0:
        from .export import write_field_csv

        out = Path(opt.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_field_csv(out / f"m_{rec.k:04d}.csv", prob.mesh, m, "m")
