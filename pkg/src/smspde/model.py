"""Coefficient sets, the Hamiltonian and the harvesting presets.

All models here depend on the state through the pointwise value ``y`` and
the ball average ``ybar`` only. Drift, volatility and jump core are affine
in ``(y, ybar, u)``:

    b       = b_y y + b_yb ybar + b_u u + b_0
    sigma   = s_y y + s_yb ybar + s_u u + s_0
    gamma   = gamma0(zeta) * (c_y y + c_yb ybar + c_u u + c_0)

The adjoint jump component is carried as ``r(zeta) = c_r * gamma0(zeta)``,
so the jump part of the Hamiltonian is ``gamma_core * c_r * m2`` with
``m2 = int gamma0^2 dnu``.

Functions accept numpy arrays and broadcast; ``x`` is an ``(N, dim)`` array
of node coordinates or ``None`` when the model ignores space.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .noise import LevyModel, levy_moments
from .operators import Coefficient


@dataclass(frozen=True)
class Affine:
    """``a_y y + a_yb ybar + a_u u + a_0``."""

    y: float = 0.0
    yb: float = 0.0
    u: float = 0.0
    const: float = 0.0

    def __call__(self, y, yb, u):
        return self.y * y + self.yb * yb + self.u * u + self.const


@dataclass(frozen=True)
class HamiltonianInputs:
    y: np.ndarray | float
    yb: np.ndarray | float
    u: np.ndarray | float
    p: np.ndarray | float = 0.0
    q: np.ndarray | float = 0.0
    cr: np.ndarray | float = 0.0


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Base model: affine dynamics, zero costs. Subclasses supply f and g."""

    name: str = "base"
    drift: Affine = Affine()
    vol: Affine = Affine()
    jump: Affine = Affine()
    levy: LevyModel = field(default_factory=LevyModel)
    u_min: float = 0.0
    u_max: float = np.inf
    # log utilities need strictly positive controls / states
    positive_u: bool = False
    positive_y: bool = False

    def __post_init__(self):
        if not self.u_min <= self.u_max:
            raise ValueError(f"empty control set [{self.u_min}, {self.u_max}]")
        if self.positive_u and not self.u_min > 0:
            raise ValueError(f"{self.name} needs u_min > 0 (log utility)")

    @property
    def m2(self) -> float:
        return levy_moments(self.levy).m2

    @property
    def concave(self) -> bool:
        return False

    # running / terminal cost (overridden) --------------------------------

    def f(self, t, x, y, yb, u):
        return np.zeros(np.broadcast(y, yb, u).shape)

    def df_dy(self, t, x, y, yb, u):
        return np.zeros(np.broadcast(y, yb, u).shape)

    def df_dyb(self, t, x, y, yb, u):
        return np.zeros(np.broadcast(y, yb, u).shape)

    def df_du(self, t, x, y, yb, u):
        return np.zeros(np.broadcast(y, yb, u).shape)

    def g(self, x, y, yb):
        return np.zeros(np.broadcast(y, yb).shape)

    def dg_dy(self, x, y, yb):
        return np.zeros(np.broadcast(y, yb).shape)

    def dg_dyb(self, x, y, yb):
        return np.zeros(np.broadcast(y, yb).shape)

    # closed-form maximizer of H in u, if any
    def stationary_control(self, p):
        return None

    def stationary_control_xfree(self, p_integral: float, volume: float):
        return None

    # sets --------------------------------------------------------------

    def in_S(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        ok = np.isfinite(y)
        if self.positive_y:
            ok &= y > 0
        return ok

    def check_u(self, u, slack: float = 1e-12):
        u = np.asarray(u, dtype=float)
        scale = max(1.0, abs(self.u_min), abs(self.u_max) if np.isfinite(self.u_max) else 1.0)
        if np.any(u < self.u_min - slack * scale) or np.any(u > self.u_max + slack * scale):
            raise ValueError(f"control outside U = [{self.u_min}, {self.u_max}]")
        if self.positive_u and np.any(u <= 0):
            raise ValueError("log utility needs u > 0")

    def project(self, u):
        return np.clip(u, self.u_min, self.u_max)

    def with_levy(self, levy: LevyModel) -> ModelSpec:
        return replace(self, levy=levy)


@dataclass(frozen=True, eq=False)
class HarvestLog(ModelSpec):
    """``b = alpha ybar - u``, ``sigma = beta ybar``, ``gamma = gamma0 ybar``; log utility."""

    name: str = "harvest-log"
    alpha: float = 0.5
    beta: float = 0.0
    u_min: float = 1e-6
    u_max: float = 1e4
    positive_u: bool = True
    positive_y: bool = True

    def __post_init__(self):
        object.__setattr__(self, "drift", Affine(yb=self.alpha, u=-1.0))
        object.__setattr__(self, "vol", Affine(yb=self.beta))
        object.__setattr__(self, "jump", Affine(yb=1.0))
        super().__post_init__()

    @property
    def concave(self) -> bool:
        return True

    def f(self, t, x, y, yb, u):
        u = np.asarray(u, dtype=float)
        if np.any(u <= 0):
            raise ValueError("log utility needs u > 0")
        return np.log(u) + 0.0 * (np.asarray(y) + np.asarray(yb))

    def df_du(self, t, x, y, yb, u):
        u = np.asarray(u, dtype=float)
        if np.any(u <= 0):
            raise ValueError("log utility needs u > 0")
        return 1.0 / u + 0.0 * (np.asarray(y) + np.asarray(yb))

    def g(self, x, y, yb):
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0):
            raise ValueError("terminal state outside S (log needs y > 0)")
        return np.log(y) + 0.0 * np.asarray(yb)

    def dg_dy(self, x, y, yb):
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0):
            raise ValueError("terminal state outside S (log needs y > 0)")
        return 1.0 / y + 0.0 * np.asarray(yb)

    def stationary_control(self, p):
        p = np.asarray(p, dtype=float)
        if np.any(p <= 0):
            raise ValueError("adjoint p must be positive for the log-utility control")
        return 1.0 / p

    def stationary_control_xfree(self, p_integral, volume):
        # root of |D| / u - int p = 0
        p_integral = np.asarray(p_integral, dtype=float)
        if np.any(p_integral <= 0):
            raise ValueError("integral of p over D must be positive")
        return volume / p_integral


@dataclass(frozen=True, eq=False)
class HarvestPower(ModelSpec):
    """Harvest dynamics with ``f = u^rho / rho`` and ``g = mu(x) y``."""

    name: str = "harvest-power"
    alpha: float = 0.5
    beta: float = 0.0
    rho: float = 0.5
    mu: Coefficient | float = 1.0
    u_min: float = 0.0
    u_max: float = 1e4

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        object.__setattr__(self, "drift", Affine(yb=self.alpha, u=-1.0))
        object.__setattr__(self, "vol", Affine(yb=self.beta))
        object.__setattr__(self, "jump", Affine(yb=1.0))
        super().__post_init__()

    @property
    def concave(self) -> bool:
        return True

    def mu_at(self, x):
        if isinstance(self.mu, Coefficient):
            if x is None:
                raise ValueError("a spatial mu needs node coordinates")
            return self.mu(np.atleast_2d(x))
        return float(self.mu)

    def f(self, t, x, y, yb, u):
        u = np.asarray(u, dtype=float)
        if np.any(u < 0):
            raise ValueError("power utility needs u >= 0")
        return u**self.rho / self.rho + 0.0 * (np.asarray(y) + np.asarray(yb))

    def df_du(self, t, x, y, yb, u):
        u = np.asarray(u, dtype=float)
        if np.any(u <= 0):
            raise ValueError("power-utility marginal needs u > 0")
        return u ** (self.rho - 1.0) + 0.0 * (np.asarray(y) + np.asarray(yb))

    def g(self, x, y, yb):
        return self.mu_at(x) * np.asarray(y, dtype=float) + 0.0 * np.asarray(yb)

    def dg_dy(self, x, y, yb):
        return self.mu_at(x) + 0.0 * (np.asarray(y, dtype=float) + np.asarray(yb))

    def stationary_control(self, p):
        p = np.asarray(p, dtype=float)
        if np.any(p <= 0):
            raise ValueError("adjoint p must be positive for the power-utility control")
        return p ** (1.0 / (self.rho - 1.0))

    def stationary_control_xfree(self, p_integral, volume):
        p_integral = np.asarray(p_integral, dtype=float)
        if np.any(p_integral <= 0):
            raise ValueError("integral of p over D must be positive")
        return (p_integral / volume) ** (1.0 / (self.rho - 1.0))


@dataclass(frozen=True, eq=False)
class CustomLinear(ModelSpec):
    """User-specified affine dynamics with quadratic running and terminal costs.

    ``f = fu u + fuu u^2 + fy y + fyy y^2 + fyb ybar``,
    ``g = gy y + gyy y^2 + gyb ybar``.
    """

    name: str = "custom-linear"
    fu: float = 0.0
    fuu: float = 0.0
    fy: float = 0.0
    fyy: float = 0.0
    fyb: float = 0.0
    gy: float = 0.0
    gyy: float = 0.0
    gyb: float = 0.0

    @property
    def concave(self) -> bool:
        return self.fuu <= 0 and self.fyy <= 0 and self.gyy <= 0

    def f(self, t, x, y, yb, u):
        y, yb, u = (np.asarray(v, dtype=float) for v in (y, yb, u))
        return self.fu * u + self.fuu * u**2 + self.fy * y + self.fyy * y**2 + self.fyb * yb

    def df_dy(self, t, x, y, yb, u):
        return self.fy + 2.0 * self.fyy * np.asarray(y, dtype=float) + 0.0 * (np.asarray(yb) + np.asarray(u))

    def df_dyb(self, t, x, y, yb, u):
        return self.fyb + 0.0 * (np.asarray(y, dtype=float) + np.asarray(yb) + np.asarray(u))

    def df_du(self, t, x, y, yb, u):
        return self.fu + 2.0 * self.fuu * np.asarray(u, dtype=float) + 0.0 * (np.asarray(y) + np.asarray(yb))

    def g(self, x, y, yb):
        y, yb = np.asarray(y, dtype=float), np.asarray(yb, dtype=float)
        return self.gy * y + self.gyy * y**2 + self.gyb * yb

    def dg_dy(self, x, y, yb):
        return self.gy + 2.0 * self.gyy * np.asarray(y, dtype=float) + 0.0 * np.asarray(yb)

    def dg_dyb(self, x, y, yb):
        return self.gyb + 0.0 * (np.asarray(y, dtype=float) + np.asarray(yb))


PRESETS = {"harvest-log": HarvestLog, "harvest-power": HarvestPower, "custom-linear": CustomLinear}


# Hamiltonian ---------------------------------------------------------------


def hamiltonian(spec: ModelSpec, t, x, inp: HamiltonianInputs):
    """``f + b p + sigma q + gamma_core c_r m2``."""
    spec.check_u(inp.u)
    y, yb, u = inp.y, inp.yb, inp.u
    return (
        spec.f(t, x, y, yb, u)
        + spec.drift(y, yb, u) * inp.p
        + spec.vol(y, yb, u) * inp.q
        + spec.jump(y, yb, u) * inp.cr * spec.m2
    )


def dH_du(spec: ModelSpec, t, x, inp: HamiltonianInputs):
    spec.check_u(inp.u)
    return (
        spec.df_du(t, x, inp.y, inp.yb, inp.u)
        + spec.drift.u * inp.p
        + spec.vol.u * inp.q
        + spec.jump.u * inp.cr * spec.m2
    )


def dH_dy(spec: ModelSpec, t, x, inp: HamiltonianInputs):
    return (
        spec.df_dy(t, x, inp.y, inp.yb, inp.u)
        + spec.drift.y * inp.p
        + spec.vol.y * inp.q
        + spec.jump.y * inp.cr * spec.m2
    )


def dH_dybar(spec: ModelSpec, t, x, inp: HamiltonianInputs):
    """Slope through the ball-average channel; the adjoint applies the averaged dual to it."""
    return (
        spec.df_dyb(t, x, inp.y, inp.yb, inp.u)
        + spec.drift.yb * inp.p
        + spec.vol.yb * inp.q
        + spec.jump.yb * inp.cr * spec.m2
    )


def terminal_slope(spec: ModelSpec, x, y, yb):
    """``(dg/dy, dg/dybar)``; raises when ``y`` lies outside S."""
    if not np.all(spec.in_S(y)):
        raise ValueError("terminal state outside S")
    return spec.dg_dy(x, y, yb), spec.dg_dyb(x, y, yb)


@dataclass
class ConcavityReport:
    worst_violation: float
    worst_H: float
    worst_g: float
    samples: int
    passed: bool


def check_concavity(spec: ModelSpec, sample_count: int = 200, seed: int = 0, tol: float = 1e-12) -> ConcavityReport:
    """Midpoint concavity probes of ``(y, ybar, u) -> H`` and ``(y, ybar) -> g``.

    A violation is ``(h(a) + h(b)) / 2 - h((a + b) / 2)`` when positive,
    measured relative to ``max(1, |h|)``.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    rng = np.random.default_rng(seed)
    n = sample_count
    y_lo = 0.05 if spec.positive_y else -3.0
    u_lo = max(spec.u_min, 1e-3) if spec.positive_u or isinstance(spec, HarvestPower) else spec.u_min
    u_hi = min(spec.u_max, u_lo + 10.0)

    def draw():
        return (rng.uniform(y_lo, 3.0, n), rng.uniform(y_lo, 3.0, n), rng.uniform(u_lo, u_hi, n))

    # adjoint values are fixed per probe pair
    p, q, cr = rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(-2, 2, n)
    x = None
    if isinstance(spec, HarvestPower) and isinstance(spec.mu, Coefficient):
        x = np.zeros((n, spec.mu.dim))
    a, b = draw(), draw()
    mid = tuple(0.5 * (s + r) for s, r in zip(a, b))

    def H(z):
        return hamiltonian(spec, 0.0, x, HamiltonianInputs(z[0], z[1], z[2], p, q, cr))

    Ha, Hb, Hm = H(a), H(b), H(mid)
    vH = (0.5 * (Ha + Hb) - Hm) / np.maximum(1.0, np.abs(Hm))
    ga, gb, gm = spec.g(x, a[0], a[1]), spec.g(x, b[0], b[1]), spec.g(x, mid[0], mid[1])
    vg = (0.5 * (ga + gb) - gm) / np.maximum(1.0, np.abs(gm))
    wH, wg = max(0.0, float(vH.max())), max(0.0, float(vg.max()))
    worst = max(wH, wg)
    return ConcavityReport(worst, wH, wg, n, worst <= tol)
