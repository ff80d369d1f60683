"""Run configuration: INI files validated against a fixed schema before any work starts."""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .materials import TractionSpec


class ConfigError(ValueError):
    pass


@dataclass
class MeshSection:
    n: int = 50
    fine_n: int = 0  # 0 -> 4 * n


@dataclass
class ModelSection:
    type: str = "neo_hookean"
    nu: float = 0.35


@dataclass
class ExperimentSection:
    # "t_normal t_shear" pairs separated by ';'
    tractions: str = "0.5 0.0"
    noise_brightness: float = 0.0
    force_error: float = 0.0
    noise_seed: int = -1  # -1 -> derived from the speckle seed


@dataclass
class SpeckleSection:
    correlation_length: float = 0.01
    seed: int = 0
    pixels_per_unit: int = 0  # 0 -> fine_n


@dataclass
class TruthSection:
    kind: str = "single_void"
    m_bg: float = 2.0
    m_low: float = -2.0
    m_high: float = 4.0
    radius: float = 0.1
    center_x: float = 0.5
    center_y: float = 0.5
    grid: int = 3
    num_seeds: int = 8
    correlation_length: float = 0.1
    seed: int = 0


@dataclass
class RegularizationSection:
    gamma_l2: float = 0.0
    gamma_h1: float = 0.0
    gamma_tv: float = 0.0
    eps_tv: float = 1e-2
    tv_mode: str = "primal_dual"


@dataclass
class SolverSection:
    m0: float = 2.0
    g_tol: float = 1e-6
    max_iter: int = 100
    cg_max_iter: int = 200
    forward_tol: float = 1e-10
    full_newton: bool = False
    misfit_subdivisions: int = 0  # 0 -> enough to resolve the pixels
    checkpoint_every: int = 0


@dataclass
class EigSection:
    gamma: float = 0.0  # 0 -> gamma_h1
    delta: float = 0.0  # 0 -> gamma_h1
    rank: int = 20
    r_max: int = 200
    oversample: int = 10
    power_iters: int = 0
    ratio: float = 1e-3
    seed: int = 0
    zero_hessian: bool = False  # test hook: replace the Hessian by zero
    # non-empty -> generate, invert and score one noiseless bundle per traction
    sweep_tractions: str = ""


@dataclass
class OutputSection:
    dir: str = "idic_out"


SECTIONS = {
    "mesh": MeshSection, "model": ModelSection, "experiment": ExperimentSection,
    "speckle": SpeckleSection, "truth": TruthSection, "regularization": RegularizationSection,
    "solver": SolverSection, "eig": EigSection, "output": OutputSection,
}
MODELS = ("linear", "neo_hookean")


@dataclass
class RunConfig:
    mesh: MeshSection = field(default_factory=MeshSection)
    model: ModelSection = field(default_factory=ModelSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    speckle: SpeckleSection = field(default_factory=SpeckleSection)
    truth: TruthSection = field(default_factory=TruthSection)
    regularization: RegularizationSection = field(default_factory=RegularizationSection)
    solver: SolverSection = field(default_factory=SolverSection)
    eig: EigSection = field(default_factory=EigSection)
    output: OutputSection = field(default_factory=OutputSection)
    source: str = "<defaults>"

    @property
    def fine_n(self) -> int:
        return self.mesh.fine_n or 4 * self.mesh.n

    @property
    def pixels_per_unit(self) -> int:
        return self.speckle.pixels_per_unit or self.fine_n

    @property
    def tractions(self) -> list[TractionSpec]:
        return parse_tractions(self.experiment.tractions)

    def misfit_subdivisions(self, pixels_per_unit: int | None = None) -> int:
        if self.solver.misfit_subdivisions:
            return self.solver.misfit_subdivisions
        ppu = pixels_per_unit or self.pixels_per_unit
        return max(1, -(-ppu // self.mesh.n))

    def validate(self) -> "RunConfig":
        e = []
        if self.mesh.n < 1:
            e.append("[mesh] n must be at least 1")
        if self.mesh.fine_n and self.mesh.fine_n < self.mesh.n:
            e.append("[mesh] fine_n must be >= n")
        if self.model.type not in MODELS:
            e.append(f"[model] type must be one of {MODELS}")
        if not 0 < self.model.nu < 0.5:
            e.append("[model] nu must lie in (0, 0.5)")
        try:
            if not self.tractions:
                e.append("[experiment] tractions is empty")
        except ConfigError as exc:
            e.append(str(exc))
        if self.experiment.noise_brightness < 0 or not 0 <= self.experiment.force_error < 1:
            e.append("[experiment] noise_brightness must be >= 0 and force_error in [0, 1)")
        if not 0 < self.speckle.correlation_length <= 1:
            e.append("[speckle] correlation_length must lie in (0, 1]")
        r = self.regularization
        if min(r.gamma_l2, r.gamma_h1, r.gamma_tv) < 0:
            e.append("[regularization] weights must be non-negative")
        if r.tv_mode not in ("primal_dual", "primal"):
            e.append("[regularization] tv_mode must be primal_dual or primal")
        if r.gamma_tv > 0 and not r.eps_tv > 0:
            e.append("[regularization] eps_tv must be positive")
        if self.solver.max_iter < 0 or not self.solver.g_tol > 0:
            e.append("[solver] max_iter must be >= 0 and g_tol > 0")
        if self.eig.rank < 1 or self.eig.r_max < self.eig.rank:
            e.append("[eig] need 1 <= rank <= r_max")
        if self.eig.oversample < 0 or self.eig.power_iters < 0:
            e.append("[eig] oversample and power_iters must be >= 0")
        try:
            parse_tractions(self.eig.sweep_tractions)
        except ConfigError as exc:
            e.append(str(exc).replace("[experiment] tractions", "[eig] sweep_tractions"))
        if e:
            raise ConfigError(f"{self.source}: " + "; ".join(e))
        return self

    def regularization_config(self):
        from .regularization import RegConfig

        r = self.regularization
        try:
            return RegConfig(r.gamma_l2, r.gamma_h1, r.gamma_tv, r.eps_tv, None, r.tv_mode)
        except ValueError as exc:
            raise ConfigError(f"{self.source}: [regularization] {exc}") from exc

    def to_ini(self) -> str:
        out = []
        for name in SECTIONS:
            out.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                v = getattr(getattr(self, name), f.name)
                if isinstance(v, bool):
                    v = str(v).lower()
                elif isinstance(v, float):
                    v = repr(v)
                out.append(f"{f.name} = {v}")
            out.append("")
        return "\n".join(out)


def parse_tractions(text: str) -> list[TractionSpec]:
    out = []
    for chunk in text.split(";"):
        parts = chunk.split()
        if not parts:
            continue
        if len(parts) > 2:
            raise ConfigError(f"[experiment] tractions: cannot parse {chunk.strip()!r} (expected 't_normal [t_shear]')")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ConfigError(f"[experiment] tractions: non-numeric entry in {chunk.strip()!r}") from None
        out.append(TractionSpec(vals[0], vals[1] if len(vals) > 1 else 0.0))
    return out


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) to the 1-based line that defines it."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            out.setdefault((section, ""), i)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            out.setdefault((section, m.group(1).strip().lower()), i)
    return out


def _convert(raw: str, kind: type, where: str):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    lines = _line_index(text)
    cfg = RunConfig(source=source)
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"{source}:{lines.get((sec, ''), '?')}: unknown section [{sec}]; "
                              f"allowed: {', '.join(SECTIONS)}")
        obj = getattr(cfg, sec)
        known = {f.name: type(f.default) for f in dataclasses.fields(obj)}
        for key, raw in cp.items(sec):
            where = f"{source}:{lines.get((sec, key), '?')}"
            if key not in known:
                raise ConfigError(f"{where}: unknown key '{key}' in section [{sec}]; "
                                  f"allowed: {', '.join(known)}")
            setattr(obj, key, _convert(raw, known[key], f"{where}: [{sec}] {key}"))
    return cfg.validate()


PRESETS = ("hyper_tv", "linear_tv", "h1")


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return resources.files("idic").joinpath("presets", f"{name}.cfg").read_text()


def load_config(path) -> RunConfig:
    """Read a config file; a bare preset name (e.g. ``hyper_tv``) loads the shipped preset."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        return parse_config(preset_text(str(path)), f"preset:{path}")
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(p))
