"""Synthetic experiment factory: true fields, fine-mesh forward solves, image pairs
with brightness noise, biased tractions, and the on-disk bundle format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fem
from .export import read_field_csv, write_field_csv
from .forward import solve_forward
from .imaging import (DEFAULT_PADDING, ImageField, SpeckleParams, add_brightness_noise, read_pgm,
                      reference_image, render_deformed, sample_grf, speckle_image, write_pgm)
from .materials import DEFAULT_POISSON, ResidualForm, TractionSpec
from .mesh import Mesh, build_unit_square_mesh

FIELD_KINDS = ("single_void", "grid_discs", "voronoi", "gaussian_random_field")
MANIFEST = "manifest.txt"
BUNDLE_FORMAT = "idic-bundle-1"


@dataclass(frozen=True)
class TrueFieldSpec:
    kind: str = "single_void"
    m_bg: float = 2.0
    m_low: float = -2.0
    m_high: float = 4.0
    radius: float = 0.1
    center: tuple[float, float] = (0.5, 0.5)
    grid: int = 3
    num_seeds: int = 8
    correlation_length: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}; choose from {FIELD_KINDS}")
        if self.kind in ("single_void", "grid_discs") and not 0 < self.radius < 0.5:
            raise ValueError("disc radius must lie in (0, 0.5)")
        cx, cy = self.center
        if self.kind == "single_void" and not (0 < cx < 1 and 0 < cy < 1):
            raise ValueError("disc center must lie inside the unit square")
        if self.kind == "grid_discs":
            if self.grid < 1:
                raise ValueError("grid must be at least 1")
            if 2 * self.radius >= 1.0 / self.grid:
                raise ValueError(f"discs of radius {self.radius} overlap on a {self.grid}x{self.grid} grid")
        if self.kind == "voronoi" and self.num_seeds < 1:
            raise ValueError("voronoi needs at least one seed")


def make_true_field(spec: TrueFieldSpec, mesh: Mesh) -> np.ndarray:
    """Nodal log-modulus values of the requested ground truth."""
    X = mesh.vertices
    if spec.kind == "single_void":
        inside = np.hypot(X[:, 0] - spec.center[0], X[:, 1] - spec.center[1]) < spec.radius
        return np.where(inside, spec.m_low, spec.m_bg)
    if spec.kind == "grid_discs":
        k = spec.grid
        m = np.full(len(X), spec.m_bg, dtype=float)
        for i in range(k):
            for j in range(k):
                c = ((i + 0.5) / k, (j + 0.5) / k)
                inside = np.hypot(X[:, 0] - c[0], X[:, 1] - c[1]) < spec.radius
                m[inside] = spec.m_low if (i + j) % 2 == 0 else spec.m_high
        return m
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "voronoi":
        seeds = rng.random((spec.num_seeds, 2))
        levels = rng.uniform(spec.m_low, spec.m_high, spec.num_seeds)
        d = np.linalg.norm(X[:, None, :] - seeds[None], axis=2)
        return levels[np.argmin(d, axis=1)]
    g = sample_grf(SpeckleParams(spec.correlation_length, spec.seed, mesh.nx), mesh)
    lo, hi = g.min(), g.max()
    s = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    return spec.m_low + (spec.m_high - spec.m_low) * s


@dataclass
class ExperimentData:
    """One load case: reported and true traction with its image pair."""

    traction: TractionSpec
    traction_true: TractionSpec
    I0: ImageField
    I1: ImageField
    mean_axial_strain: float = float("nan")
    u_true: np.ndarray | None = None


@dataclass
class ExperimentBundle:
    experiments: list[ExperimentData]
    m_true: np.ndarray | None
    m_true_fine: np.ndarray | None
    problem_n: int
    fine_n: int
    metadata: dict = field(default_factory=dict)

    @property
    def problem_mesh(self) -> Mesh:
        return build_unit_square_mesh(self.problem_n)

    @property
    def fine_mesh(self) -> Mesh:
        return build_unit_square_mesh(self.fine_n)


def mean_axial_strain(mesh: Mesh, u) -> float:
    G = fem.cell_displacement_gradient(mesh, u)
    return float(np.sum(mesh.areas * G[:, 0, 0]) / np.sum(mesh.areas))


def whole_pixel_padding(pixels_per_unit: int, padding: float = DEFAULT_PADDING) -> float:
    return math.ceil(padding * pixels_per_unit - 1e-9) / pixels_per_unit


def generate_experiment(spec: TrueFieldSpec, traction: TractionSpec | Sequence[TractionSpec],
                        noise_levels=(0.0, 0.0), speckle: SpeckleParams | None = None,
                        fine_n: int = 200, problem_n: int = 50, model: str = "neo_hookean",
                        nu: float = DEFAULT_POISSON, noise_seed: int | None = None) -> ExperimentBundle:
    """Run the synthetic-data pipeline for one or several load cases.

    All load cases share the specimen, its speckle and the reference image.
    ``noise_levels = (brightness, force)``: brightness noise has standard
    deviation ``brightness * 255`` and is added to the deformed image only; the
    reported traction is the true one scaled by ``1 - force``.
    """
    if fine_n < problem_n:
        raise ValueError("fine mesh must be at least as fine as the problem mesh")
    tractions = [traction] if isinstance(traction, TractionSpec) else list(traction)
    if not tractions:
        raise ValueError("no tractions given")
    brightness, force_error = (float(v) for v in noise_levels)
    if speckle is None:
        speckle = SpeckleParams(0.01, 0, fine_n)
    if noise_seed is None:
        noise_seed = speckle.seed + 7919
    fine = build_unit_square_mesh(fine_n)
    problem = build_unit_square_mesh(problem_n)
    m_fine = make_true_field(spec, fine)
    m_problem = make_true_field(spec, problem)
    padding = whole_pixel_padding(speckle.pixels_per_unit)
    spk = speckle_image(speckle, padding)
    I0 = reference_image(spk).quantized()
    form = ResidualForm(fine, model, nu)
    experiments = []
    for i, t in enumerate(tractions):
        u, _ = solve_forward(form, m_fine, t)
        I1 = render_deformed(spk, u, fine)
        I1 = add_brightness_noise(I1, brightness, noise_seed + i).quantized()
        reported = TractionSpec(t.t_normal * (1 - force_error), t.t_shear * (1 - force_error))
        experiments.append(ExperimentData(reported, t, I0, I1, mean_axial_strain(fine, u), u))
    meta = {
        "model": model, "nu": nu, "noise_brightness": brightness, "force_error": force_error,
        "speckle_ell": speckle.correlation_length, "speckle_seed": speckle.seed,
        "pixels_per_unit": speckle.pixels_per_unit, "padding": padding, "noise_seed": noise_seed,
        "field_kind": spec.kind, "field_m_bg": spec.m_bg, "field_m_low": spec.m_low,
        "field_m_high": spec.m_high, "field_radius": spec.radius, "field_center_x": spec.center[0],
        "field_center_y": spec.center[1], "field_grid": spec.grid, "field_num_seeds": spec.num_seeds,
        "field_correlation_length": spec.correlation_length, "field_seed": spec.seed,
    }
    return ExperimentBundle(experiments, m_problem, m_fine, problem_n, fine_n, meta)


# -- manifest and bundle I/O -------------------------------------------------------

def format_manifest(entries: dict) -> str:
    lines = []
    for k, v in entries.items():
        if "=" in str(k) or "\n" in str(v):
            raise ValueError(f"manifest entry {k!r} cannot be represented")
        lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> dict:
    """Values come back as int, float or str (floats are stored with ``repr``)."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ValueError(f"manifest line {lineno}: expected 'key = value'")
        k, _, v = s.partition("=")
        out[k.strip()] = _parse_scalar(v.strip())
    return out


def _parse_scalar(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def write_bundle(bundle: ExperimentBundle, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {"format": BUNDLE_FORMAT, "problem_n": bundle.problem_n, "fine_n": bundle.fine_n,
               "num_experiments": len(bundle.experiments)}
    entries.update(bundle.metadata)
    for i, e in enumerate(bundle.experiments):
        write_pgm(d / f"I0_{i}.pgm", e.I0)
        write_pgm(d / f"I1_{i}.pgm", e.I1)
        entries[f"exp{i}.I0"] = f"I0_{i}.pgm"
        entries[f"exp{i}.I1"] = f"I1_{i}.pgm"
        entries[f"exp{i}.t_normal"] = float(e.traction.t_normal)
        entries[f"exp{i}.t_shear"] = float(e.traction.t_shear)
        entries[f"exp{i}.t_normal_true"] = float(e.traction_true.t_normal)
        entries[f"exp{i}.t_shear_true"] = float(e.traction_true.t_shear)
        entries[f"exp{i}.mean_axial_strain"] = float(e.mean_axial_strain)
    if bundle.m_true is not None:
        write_field_csv(d / "m_true.csv", bundle.problem_mesh, bundle.m_true, "m")
        entries["m_true"] = "m_true.csv"
    if bundle.m_true_fine is not None:
        write_field_csv(d / "m_true_fine.csv", bundle.fine_mesh, bundle.m_true_fine, "m")
        entries["m_true_fine"] = "m_true_fine.csv"
    (d / MANIFEST).write_text(format_manifest(entries))
    return d


def read_bundle(directory) -> ExperimentBundle:
    d = Path(directory)
    path = d / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{d}: no {MANIFEST}")
    man = parse_manifest(path.read_text())
    n_exp = int(man.get("num_experiments", 0))
    if n_exp < 1:
        raise ValueError(f"{path}: num_experiments must be at least 1")
    exps = []
    for i in range(n_exp):
        p = f"exp{i}."
        t = TractionSpec(float(man[p + "t_normal"]), float(man.get(p + "t_shear", 0.0)))
        tt = TractionSpec(float(man.get(p + "t_normal_true", t.t_normal)),
                          float(man.get(p + "t_shear_true", t.t_shear)))
        exps.append(ExperimentData(t, tt, read_pgm(d / str(man[p + "I0"])), read_pgm(d / str(man[p + "I1"])),
                                   float(man.get(p + "mean_axial_strain", float("nan")))))
    m_true = read_field_csv(d / man["m_true"])[1] if "m_true" in man else None
    m_fine = read_field_csv(d / man["m_true_fine"])[1] if "m_true_fine" in man else None
    skip = {"format", "problem_n", "fine_n", "num_experiments", "m_true", "m_true_fine"}
    meta = {k: v for k, v in man.items() if k not in skip and not k.startswith("exp")}
    problem_n = int(man["problem_n"])
    return ExperimentBundle(exps, m_true, m_fine, problem_n, int(man.get("fine_n", problem_n)), meta)
