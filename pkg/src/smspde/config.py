"""Run configuration: YAML in, validated dataclasses out, canonical YAML back.

Unknown keys anywhere are rejected. The output directory may be overridden
with the ``SMSPDE_OUTPUT_DIR`` environment variable; nothing else is read
from the environment.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np
import yaml

from .control import MODES, HarvestProblem
from .grid import GridError, build_grid
from .model import PRESETS, Affine, CustomLinear, HarvestLog, HarvestPower
from .noise import TWO_POINT, UNIFORM, LevyModel
from .operators import Coefficient, assemble_operator
from .spacemean import DUAL_MODES, build_kernel

OUTPUT_ENV = "SMSPDE_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    preset: str = "harvest-log"
    alpha: float = 0.5
    beta: float = 0.0
    rho: float = 0.5
    mu: Any = 1.0
    theta: float = 0.1
    u_min: float = 1e-6
    u_max: float = 1e4
    # diffusion operator: alpha_ij (scalar or nested list), beta_i, c
    diffusion: Any = 0.5
    advection: Any = None
    reaction: Any = 0.0
    # initial and boundary data: number, polynomial coefficients, or {"sine": amplitude}
    xi: Any = 1.0
    eta: Any = 1.0
    # custom-linear only
    custom: dict = field(default_factory=dict)


@dataclass
class GridConfig:
    extents: list = field(default_factory=lambda: [[0.0, 1.0]])
    resolution: Any = 51


@dataclass
class TimeConfig:
    T: float = 1.0
    M: int = 100


@dataclass
class NoiseConfig:
    intensity: float = 0.0
    mark_law: str = TWO_POINT
    mark_params: dict = field(default_factory=lambda: {"values": [1.0, -0.5], "probs": [0.5, 0.5]})
    gamma0: list = field(default_factory=lambda: [0.0, 1.0])
    paths: int = 1
    seed: int = 0


@dataclass
class SolverConfig:
    control_mode: str = "pointwise"
    u0: float = 1.0
    omega: float = 0.5
    tol: float = 1e-6
    relative_tol: bool = False
    max_iter: int = 200
    dual_mode: str = "exact"
    adjoint_op: str = "transpose"
    picard_max: int = 50
    picard_tol: float = 1e-10
    threads: int = 1


@dataclass
class PicardConfig:
    """Synthetic linear driver for the ``picard`` command."""

    a_p: float = 0.5
    a_pbar: float = 0.5
    a_q: float = 0.0
    a_qbar: float = 0.3
    a_cr: float = 0.0
    a_crbar: float = 0.0
    source: float = 1.0
    initial: str = "zero"


@dataclass
class GradcheckConfig:
    thetas: list = field(default_factory=lambda: [1e-3])
    at: str = "initial"  # or "optimum"


@dataclass
class OracleConfig:
    low: float = 0.25
    high: float = 3.5
    count: int = 50


@dataclass
class OutputConfig:
    dir: str = "out"
    max_paths: int = 10


SECTIONS = {
    "model": ModelConfig,
    "grid": GridConfig,
    "time": TimeConfig,
    "noise": NoiseConfig,
    "solver": SolverConfig,
    "picard": PicardConfig,
    "gradcheck": GradcheckConfig,
    "oracle": OracleConfig,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    picard: PicardConfig = field(default_factory=PicardConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def from_dict(cls, data: dict | None) -> RunConfig:
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        parts = {}
        for name, klass in SECTIONS.items():
            sec = data.get(name) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = {f.name for f in fields(klass)}
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
            parts[name] = klass(**sec)
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def canonical_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    # checks ---------------------------------------------------------------

    def validate(self):
        m, g, t, n, s = self.model, self.grid, self.time, self.noise, self.solver
        if m.preset not in PRESETS:
            raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}, got {m.preset!r}")
        for key in ("alpha", "beta", "rho", "theta", "u_min", "u_max"):
            _finite(f"model.{key}", getattr(m, key))
        _finite("time.T", t.T)
        if not t.T > 0:
            raise ConfigError("time.T must be > 0")
        if not isinstance(t.M, int) or t.M < 1:
            raise ConfigError("time.M must be an integer >= 1")
        res = np.atleast_1d(g.resolution)
        if np.any(res < 3):
            raise ConfigError(f"grid.resolution must be >= 3 per axis, got {g.resolution}")
        if not m.theta > 0:
            raise ConfigError("model.theta must be > 0")
        if not m.u_min <= m.u_max:
            raise ConfigError("model.u_min must not exceed model.u_max")
        _finite("noise.intensity", n.intensity)
        if n.intensity < 0:
            raise ConfigError("noise.intensity must be >= 0")
        if n.mark_law not in (TWO_POINT, UNIFORM):
            raise ConfigError(f"noise.mark_law must be {TWO_POINT!r} or {UNIFORM!r}")
        if not isinstance(n.paths, int) or n.paths < 1:
            raise ConfigError("noise.paths must be an integer >= 1")
        if not isinstance(n.seed, int) or n.seed < 0:
            raise ConfigError("noise.seed must be a nonnegative integer")
        if s.control_mode not in MODES:
            raise ConfigError(f"solver.control_mode must be one of {MODES}")
        if s.dual_mode not in DUAL_MODES:
            raise ConfigError(f"solver.dual_mode must be one of {DUAL_MODES}")
        if s.adjoint_op not in ("transpose", "analytic"):
            raise ConfigError("solver.adjoint_op must be 'transpose' or 'analytic'")
        if not 0 < s.omega <= 1:
            raise ConfigError("solver.omega must lie in (0, 1]")
        for key in ("tol", "picard_tol"):
            _finite(f"solver.{key}", getattr(s, key))
        if s.max_iter < 1 or s.picard_max < 1:
            raise ConfigError("iteration caps must be >= 1")
        if s.threads < 0:
            raise ConfigError("solver.threads must be >= 0 (0 = auto)")
        if self.picard.initial not in ("zero", "terminal"):
            raise ConfigError("picard.initial must be 'zero' or 'terminal'")
        if self.oracle.count < 1 or not self.oracle.low <= self.oracle.high:
            raise ConfigError("oracle needs count >= 1 and low <= high")
        if self.gradcheck.at not in ("initial", "optimum"):
            raise ConfigError("gradcheck.at must be 'initial' or 'optimum'")
        if not self.gradcheck.thetas or any(not th > 0 for th in self.gradcheck.thetas):
            raise ConfigError("gradcheck.thetas must be positive")
        # build the pieces once so structural errors surface as config errors
        try:
            build_setup(self)
        except (GridError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc


def _finite(name: str, value):
    try:
        ok = math.isfinite(float(value))
    except (TypeError, ValueError):
        ok = False
    if not ok:
        raise ConfigError(f"{name} must be a finite number, got {value!r}")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    return RunConfig.from_dict(data)


def output_dir(cfg: RunConfig, override: str | None = None) -> str:
    return override or os.environ.get(OUTPUT_ENV) or cfg.output.dir


# construction ---------------------------------------------------------------


def _field_spec(value, grid):
    """Number, polynomial coefficients, or ``{"sine": amplitude}`` -> node values."""
    if isinstance(value, dict):
        if set(value) != {"sine"}:
            raise ValueError("field dict must be {'sine': amplitude}")
        amp = float(value["sine"])
        out = np.full(grid.size, amp)
        for k, (a, b) in enumerate(grid.extents):
            out = out * np.sin(np.pi * (grid.points[:, k] - a) / (b - a))
        return out
    if isinstance(value, (list, tuple)):
        return Coefficient(value, grid.dim)(grid.points)
    return np.full(grid.size, float(value))


@dataclass(eq=False)
class Setup:
    grid: Any
    op: Any
    kernel: Any
    spec: Any
    problem: HarvestProblem
    xi: np.ndarray
    eta: np.ndarray


def build_spec(cfg: RunConfig):
    m, n = cfg.model, cfg.noise
    levy = LevyModel(n.intensity, n.mark_law, dict(n.mark_params), tuple(float(c) for c in n.gamma0))
    if m.preset == "harvest-log":
        return HarvestLog(alpha=m.alpha, beta=m.beta, levy=levy, u_min=m.u_min, u_max=m.u_max)
    if m.preset == "harvest-power":
        mu = m.mu if np.isscalar(m.mu) else Coefficient(m.mu, len(cfg.grid.extents))
        return HarvestPower(alpha=m.alpha, beta=m.beta, rho=m.rho, mu=mu, levy=levy, u_min=m.u_min, u_max=m.u_max)
    c = dict(m.custom)
    dyn = {k: Affine(**c.pop(k, {})) for k in ("drift", "vol", "jump")}
    return CustomLinear(levy=levy, u_min=m.u_min, u_max=m.u_max, **dyn, **c)


def build_setup(cfg: RunConfig) -> Setup:
    grid = build_grid(cfg.grid.extents, cfg.grid.resolution)
    m = cfg.model
    op = assemble_operator(grid, m.diffusion, m.advection, m.reaction)
    kernel = build_kernel(grid, m.theta)
    spec = build_spec(cfg)
    xi = _field_spec(m.xi, grid)
    eta = _field_spec(m.eta, grid)
    s = cfg.solver
    problem = HarvestProblem(
        grid, op, kernel, spec, xi, eta, cfg.time.T, cfg.time.M, cfg.noise.paths, cfg.noise.seed,
        s.dual_mode, s.adjoint_op, s.threads,
    )
    return Setup(grid, op, kernel, spec, problem, xi, eta)


def default_yaml() -> str:
    return RunConfig.from_dict({}).canonical_yaml()
