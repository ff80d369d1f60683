"""``idic`` command line: generate, invert, eig, postprocess."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, parse_tractions
from .fem import SolverError

log = logging.getLogger("idic")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4
RESULT_MANIFEST = "result.txt"
DETECTION_GAP = 1.5


class SolverFailure(RuntimeError):
    pass


def _read_bundle(path):
    from .synth import read_bundle

    try:
        return read_bundle(path)
    except (ValueError, KeyError) as exc:
        raise OSError(f"{path}: malformed bundle ({exc})") from None


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.speckle.seed = args.seed
        cfg.truth.seed = args.seed
    if args.mesh is not None:
        if args.mesh < 1:
            raise ConfigError("--mesh must be at least 1")
        cfg.mesh.n = args.mesh
    return cfg.validate()


def _out_dir(cfg: RunConfig, args, default_sub: str) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output.dir) / default_sub
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- generate ----------------------------------------------------------------------

def _generate(cfg: RunConfig):
    from .imaging import SpeckleParams
    from .synth import TrueFieldSpec, generate_experiment

    t = cfg.truth
    try:
        spec = TrueFieldSpec(t.kind, t.m_bg, t.m_low, t.m_high, t.radius, (t.center_x, t.center_y),
                             t.grid, t.num_seeds, t.correlation_length, t.seed)
        speckle = SpeckleParams(cfg.speckle.correlation_length, cfg.speckle.seed, cfg.pixels_per_unit)
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: {exc}") from None
    seed = cfg.experiment.noise_seed if cfg.experiment.noise_seed >= 0 else None
    bundle = generate_experiment(spec, cfg.tractions, (cfg.experiment.noise_brightness, cfg.experiment.force_error),
                                 speckle, cfg.fine_n, cfg.mesh.n, cfg.model.type, cfg.model.nu, seed)
    return bundle


def cmd_generate(cfg: RunConfig, args) -> Path:
    from .synth import write_bundle

    bundle = _generate(cfg)
    out = Path(args.bundle or args.out or Path(cfg.output.dir) / "bundle")
    write_bundle(bundle, out)
    for i, e in enumerate(bundle.experiments):
        log.info("experiment %d: mean axial strain %.4g", i, e.mean_axial_strain)
    print(f"bundle written to {out}")
    return out


# -- invert ------------------------------------------------------------------------

def _build_problem(cfg: RunConfig, bundle, n: int, history_path=None, checkpoint_dir=None):
    from .inverse import Experiment, InverseProblem, SolverOptions
    from .mesh import build_unit_square_mesh

    mesh = build_unit_square_mesh(n)
    s = cfg.solver
    opts = SolverOptions(g_tol=s.g_tol, max_iter=s.max_iter, cg_max_iter=s.cg_max_iter,
                         forward_tol=s.forward_tol, full_newton=s.full_newton,
                         history_path=history_path, checkpoint_every=s.checkpoint_every,
                         checkpoint_dir=checkpoint_dir)
    exps = [Experiment(e.traction, e.I0, e.I1, f"exp{i}") for i, e in enumerate(bundle.experiments)]
    ppu = int(round(1.0 / bundle.experiments[0].I0.mesh.h))
    prob = InverseProblem(mesh, exps, cfg.regularization_config(), cfg.model.type, cfg.model.nu, s.m0,
                          opts, cfg.misfit_subdivisions(ppu))
    return prob


def _true_field_on(bundle, mesh):
    if bundle.m_true is not None and bundle.problem_n == mesh.nx:
        return bundle.m_true
    if bundle.m_true_fine is not None:
        from .mesh import build_unit_square_mesh

        fine = build_unit_square_mesh(bundle.fine_n)
        return fine.evaluate(bundle.m_true_fine, mesh.vertices, clip=True)
    return None


def cmd_invert(cfg: RunConfig, args) -> Path:
    from .export import write_field_csv, write_vtk
    from .inverse import solve_inverse
    from .postproc import feature_contrast, relative_field_error
    from .synth import format_manifest

    if not args.bundle:
        raise ConfigError("invert needs --bundle <dir>")
    bundle = _read_bundle(args.bundle)
    n = args.mesh if args.mesh is not None else bundle.problem_n
    out = _out_dir(cfg, args, "result")
    prob = _build_problem(cfg, bundle, n, out / "history.csv",
                          out / "checkpoints" if cfg.solver.checkpoint_every else None)
    t0 = time.perf_counter()
    res = solve_inverse(prob)
    wall = time.perf_counter() - t0
    mesh = prob.mesh
    write_field_csv(out / "m.csv", mesh, res.m, "m")
    point_data = {"m": res.m}
    for i, st in enumerate(res.state.states):
        write_field_csv(out / f"u_{i}.csv", mesh, st.u.reshape(-1, 2), "u")
        point_data[f"u_{i}"] = st.u.reshape(-1, 2)
    summary = {"status": res.status, "iterations": res.iterations, "final_cost": float(res.history[-1].cost),
               "relative_cost": float(res.history[-1].rel_cost), "final_misfit": float(res.history[-1].misfit),
               "grad_norm": float(res.history[-1].grad_norm), "mesh_n": n, "model": cfg.model.type,
               "nu": float(cfg.model.nu), "gamma_l2": float(cfg.regularization.gamma_l2),
               "gamma_h1": float(cfg.regularization.gamma_h1), "gamma_tv": float(cfg.regularization.gamma_tv),
               "bundle": str(Path(args.bundle).resolve()), "num_experiments": prob.num_experiments,
               "error_norm": "L2"}
    m_true = _true_field_on(bundle, mesh)
    if m_true is not None:
        point_data["m_true"] = m_true
        summary["relative_error"] = relative_field_error(mesh, m_true, res.m)
        bg = float(bundle.metadata.get("field_m_bg", 2.0))
        void = np.abs(m_true - bg) > 1e-12
        if bundle.metadata.get("field_kind") == "single_void" and void.any() and not void.all():
            gap = feature_contrast(m_true, res.m, bg)
            summary["detection_gap"] = gap
            summary["detection_success"] = "yes" if gap >= DETECTION_GAP else "no"
    if res.dual is not None:
        summary["dual_max_norm"] = res.dual.max_norm
    summary["wall_time_s"] = float(round(wall, 3))
    write_vtk(out / "fields.vtk", mesh, point_data)
    (out / "config_used.cfg").write_text(cfg.to_ini())
    (out / RESULT_MANIFEST).write_text(format_manifest(summary))
    print(f"inversion {res.status} after {res.iterations} iterations; results in {out}")
    if "relative_error" in summary:
        print(f"relative L2 error {summary['relative_error']:.4f}")
    if res.status not in ("converged", "max_iter", "target_reached"):
        raise SolverFailure(f"inverse solver stopped with status {res.status}")
    return out


def _read_result(result_dir):
    from .export import read_field_csv
    from .synth import parse_manifest

    d = Path(result_dir)
    man = parse_manifest((d / RESULT_MANIFEST).read_text())
    m = read_field_csv(d / "m.csv")[1]
    return d, man, m


# -- eig ---------------------------------------------------------------------------

def _h1_prior(cfg: RunConfig, mesh, gamma_h1: float):
    from .eig import PriorOperator

    return PriorOperator(mesh, cfg.eig.gamma or gamma_h1, cfg.eig.delta or gamma_h1)


def _gevp(cfg: RunConfig, action, prior):
    from .eig import gevp_adaptive

    e = cfg.eig
    return gevp_adaptive(action, prior, e.rank, e.r_max, e.ratio, e.oversample, e.seed, e.power_iters)


def eig_traction_sweep(cfg: RunConfig, tractions) -> list[dict]:
    """Psi for each traction: noiseless synthetic data, H1 inversion from m0, EIG at the result."""
    import dataclasses

    from .eig import eig_value
    from .inverse import solve_inverse

    if cfg.regularization.gamma_tv > 0 or cfg.regularization.gamma_h1 <= 0:
        raise ConfigError(f"{cfg.source}: the traction sweep needs gamma_h1 > 0 and gamma_tv = 0")
    rows = []
    for t in tractions:
        c = dataclasses.replace(cfg, experiment=dataclasses.replace(
            cfg.experiment, tractions=f"{t.t_normal!r} {t.t_shear!r}", noise_brightness=0.0, force_error=0.0))
        bundle = _generate(c)
        prob = _build_problem(c, bundle, c.mesh.n)
        res = solve_inverse(prob)
        g = _gevp(c, res.state.misfit_hessian_action, _h1_prior(c, prob.mesh, c.regularization.gamma_h1))
        rows.append({"t_normal": t.t_normal, "t_shear": t.t_shear, "psi": eig_value(g), "rank": g.rank,
                     "iterations": res.iterations, "mean_axial_strain": bundle.experiments[0].mean_axial_strain})
        log.info("sweep t=%g: psi %.6g", t.t_normal, rows[-1]["psi"])
    return rows


def _write_sweep(out: Path, rows) -> bool:
    keys = list(rows[0])
    with open(out / "psi_sweep.csv", "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(r[k])) if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")
    psi = [r["psi"] for r in rows]
    return all(b >= a for a, b in zip(psi, psi[1:]))


def cmd_eig(cfg: RunConfig, args) -> Path:
    from .eig import eig_value, write_spectrum_csv
    from .synth import format_manifest

    sweep = parse_tractions(cfg.eig.sweep_tractions)
    if sweep:
        rows = eig_traction_sweep(cfg, sweep)
        out = _out_dir(cfg, args, "eig_sweep")
        mono = _write_sweep(out, rows)
        for r in rows:
            print(f"t_normal {r['t_normal']:g}: psi = {r['psi']:.6g} (rank {r['rank']})")
        print(f"psi monotone non-decreasing: {'yes' if mono else 'no'}; table in {out / 'psi_sweep.csv'}")
        return out
    if not args.bundle:
        raise ConfigError("eig needs --bundle <inversion result dir>")
    d, man, m = _read_result(args.bundle)
    if float(man.get("gamma_tv", 0.0)) > 0 or float(man.get("gamma_h1", 0.0)) <= 0:
        raise ConfigError("information gain needs an inversion with H1 regularization only "
                          "(TV results have no Gaussian prior to linearize about)")
    bundle = _read_bundle(man["bundle"])
    prob = _build_problem(cfg, bundle, int(man["mesh_n"]))
    gamma_h1 = float(man["gamma_h1"])
    prior = _h1_prior(cfg, prob.mesh, gamma_h1)
    if cfg.eig.zero_hessian:
        def action(v):
            return np.zeros_like(v)
    else:
        state = prob.evaluate(m)
        action = state.misfit_hessian_action
    res = _gevp(cfg, action, prior)
    psi = eig_value(res)
    out = _out_dir(cfg, args, "eig")
    write_spectrum_csv(out / "spectrum.csv", res)
    (out / "eig.txt").write_text(format_manifest({"psi": psi, "rank": res.rank,
                                                  "prior_gamma": prior.gamma, "prior_delta": prior.delta}))
    print(f"EIG psi = {psi:.6g} (rank {res.rank}); report in {out}")
    return out


# -- postprocess -------------------------------------------------------------------

def cmd_postprocess(cfg: RunConfig, args) -> Path:
    from .export import read_field_csv, write_field_csv, write_vtk
    from .mesh import build_unit_square_mesh
    from .postproc import (compute_strain, compute_stress, project_to_nodes, relative_field_error,
                           von_mises)
    from .synth import format_manifest

    if not args.bundle:
        raise ConfigError("postprocess needs --bundle <inversion result dir>")
    d, man, m = _read_result(args.bundle)
    mesh = build_unit_square_mesh(int(man["mesh_n"]))
    nu = float(man.get("nu", cfg.model.nu))
    out = _out_dir(cfg, args, "post")
    summary = {"stress_law": "linear_elastic_plane_strain", "model": man.get("model", "")}
    for i in range(int(man.get("num_experiments", 1))):
        u = read_field_csv(d / f"u_{i}.csv")[1]
        eps = compute_strain(mesh, u)
        sig = compute_stress(mesh, u, m, nu)
        vm_cell = von_mises(sig.full())
        vm = np.maximum(project_to_nodes(mesh, vm_cell), 0.0)
        write_field_csv(out / f"von_mises_{i}.csv", mesh, vm, "von_mises")
        exx, eyy, exy = (project_to_nodes(mesh, eps.values[:, a, b]) for a, b in ((0, 0), (1, 1), (0, 1)))
        np.savetxt(out / f"strain_{i}.csv", np.column_stack([mesh.vertices, exx, eyy, exy]), delimiter=",",
                   header="x,y,eps_xx,eps_yy,eps_xy", comments="", fmt="%.17g")
        write_vtk(out / f"post_{i}.vtk", mesh, {"von_mises": vm, "m": m},
                  {"strain": eps.values.reshape(-1, 4), "von_mises_cell": vm_cell})
        summary[f"exp{i}.max_von_mises"] = float(vm.max())
        summary[f"exp{i}.max_strain_xx"] = float(np.abs(eps.values[:, 0, 0]).max())
    try:
        bundle = _read_bundle(man["bundle"]) if "bundle" in man else None
    except (OSError, ValueError):
        bundle = None
    if bundle is not None:
        m_true = _true_field_on(bundle, mesh)
        if m_true is not None:
            summary["relative_error"] = relative_field_error(mesh, m_true, m)
            summary["error_norm"] = "L2"
    (out / "summary.txt").write_text(format_manifest(summary))
    print(f"post-processing written to {out}")
    return out


COMMANDS = {"generate": cmd_generate, "invert": cmd_invert, "eig": cmd_eig, "postprocess": cmd_postprocess}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idic", description="Image-based log-modulus inference.")
    p.add_argument("--version", action="version", version=f"idic {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI config file or preset name (hyper_tv, linear_tv, h1)")
    p.add_argument("--bundle", help="data bundle (generate/invert) or inversion result dir (eig/postprocess)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override speckle and truth seeds")
    p.add_argument("--mesh", type=int, help="override problem mesh size")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, SolverFailure, ArithmeticError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, KeyError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
