"""Brownian and compensated compound-Poisson driving noise.

One scalar Brownian motion drives the whole field. Jumps form a compound
Poisson process with intensity ``lambda`` and i.i.d. marks; a jump falling
in ``(t_m, t_{m+1}]`` is booked on step ``m``. Every path draws from its
own generator, seeded by ``SeedSequence(master_seed, spawn_key=(i,))``, so
path ``i`` does not depend on how many paths are requested.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial
from scipy import integrate

TWO_POINT = "two-point"
UNIFORM = "uniform"


@dataclass(frozen=True)
class LevyModel:
    """Finite Levy measure ``nu = intensity * mark law`` and jump kernel ``gamma0``.

    ``mark_params`` is ``{"values": [z1, z2], "probs": [p1, p2]}`` for the
    two-point law and ``{"low": a, "high": b}`` for the uniform law.
    ``gamma0`` holds polynomial coefficients in the mark (default: identity).
    """

    intensity: float = 0.0
    mark_law: str = TWO_POINT
    mark_params: dict = field(default_factory=lambda: {"values": [1.0, -0.5], "probs": [0.5, 0.5]})
    gamma0: tuple[float, ...] = (0.0, 1.0)

    def __post_init__(self):
        if not np.isfinite(self.intensity) or self.intensity < 0:
            raise ValueError(f"intensity must be >= 0, got {self.intensity}")
        if self.mark_law == TWO_POINT:
            vals = np.asarray(self.mark_params["values"], dtype=float)
            probs = np.asarray(self.mark_params["probs"], dtype=float)
            if vals.shape != probs.shape or vals.size == 0:
                raise ValueError("two-point law needs matching values and probs")
            if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0, atol=1e-12):
                raise ValueError("mark probabilities must be nonnegative and sum to 1")
        elif self.mark_law == UNIFORM:
            if not self.mark_params["high"] > self.mark_params["low"]:
                raise ValueError("uniform law needs low < high")
        else:
            raise ValueError(f"unsupported mark law {self.mark_law!r}")

    @property
    def gamma0_poly(self) -> Polynomial:
        return Polynomial(np.asarray(self.gamma0, dtype=float))

    def gamma0_of(self, z) -> np.ndarray:
        return self.gamma0_poly(np.asarray(z, dtype=float))

    def sample_marks(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.mark_law == TWO_POINT:
            vals = np.asarray(self.mark_params["values"], dtype=float)
            probs = np.asarray(self.mark_params["probs"], dtype=float)
            return vals[rng.choice(vals.size, size=n, p=probs)]
        return rng.uniform(self.mark_params["low"], self.mark_params["high"], size=n)

    def mark_mean(self, integrand: Callable | Polynomial | None = None) -> float:
        """``E[integrand(zeta)]`` under the mark law (exact for polynomials)."""
        if integrand is None:
            integrand = self.gamma0_poly
        if self.mark_law == TWO_POINT:
            vals = np.asarray(self.mark_params["values"], dtype=float)
            probs = np.asarray(self.mark_params["probs"], dtype=float)
            return float(np.dot(probs, integrand(vals)))
        a, b = float(self.mark_params["low"]), float(self.mark_params["high"])
        if isinstance(integrand, Polynomial):
            anti = integrand.integ()
            return float((anti(b) - anti(a)) / (b - a))
        val, _ = integrate.quad(integrand, a, b, epsabs=1e-13, epsrel=1e-12)
        return float(val / (b - a))


@dataclass(frozen=True)
class LevyMoments:
    m0: float
    m1: float
    m2: float


def levy_moments(levy: LevyModel) -> LevyMoments:
    """``int nu``, ``int gamma0 dnu`` and ``int gamma0^2 dnu`` in closed form."""
    g = levy.gamma0_poly
    lam = levy.intensity
    return LevyMoments(m0=lam, m1=lam * levy.mark_mean(g), m2=lam * levy.mark_mean(g * g))


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Noise of one Monte Carlo path on ``M`` steps of ``[0, T]``."""

    index: int
    master_seed: int
    T: float
    dB: np.ndarray
    jump_steps: np.ndarray
    jump_marks: np.ndarray

    @property
    def M(self) -> int:
        return self.dB.size

    @property
    def dt(self) -> float:
        return self.T / self.M

    def same_as(self, other: PathBundle) -> bool:
        return (
            self.index == other.index
            and self.master_seed == other.master_seed
            and self.T == other.T
            and np.array_equal(self.dB, other.dB)
            and np.array_equal(self.jump_steps, other.jump_steps)
            and np.array_equal(self.jump_marks, other.jump_marks)
        )


def path_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))


def _one_path(M: int, T: float, levy: LevyModel, master_seed: int, index: int) -> PathBundle:
    rng = path_rng(master_seed, index)
    dt = T / M
    dB = rng.standard_normal(M) * np.sqrt(dt)
    n_jumps = rng.poisson(levy.intensity * T) if levy.intensity > 0 else 0
    times = np.sort(rng.uniform(0.0, T, size=n_jumps))
    marks = levy.sample_marks(rng, n_jumps) if n_jumps else np.empty(0)
    steps = np.clip(np.ceil(times / dt).astype(int) - 1, 0, M - 1)
    for arr in (dB, steps, marks):
        arr.flags.writeable = False
    return PathBundle(index, master_seed, T, dB, steps, marks)


def sample_paths(
    M: int, T: float, levy: LevyModel, P: int, master_seed: int, threads: int = 1
) -> list[PathBundle]:
    """Draw ``P`` independent noise bundles; bit-identical for identical inputs."""
    if M < 1 or P < 1 or not T > 0:
        raise ValueError(f"need M >= 1, P >= 1, T > 0 (got M={M}, P={P}, T={T})")
    if threads == 1 or P < 64:
        return [_one_path(M, T, levy, master_seed, i) for i in range(P)]
    workers = None if threads == 0 else threads
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: _one_path(M, T, levy, master_seed, i), range(P)))


def compensated_increment(
    bundle: PathBundle, m: int, levy: LevyModel, integrand: Callable | Polynomial | None = None
) -> float:
    """``sum over jumps in step m of integrand(zeta) - dt * intensity * E[integrand]``."""
    if levy.intensity == 0:
        return 0.0
    if integrand is None:
        integrand = levy.gamma0_poly
    hit = bundle.jump_marks[bundle.jump_steps == m]
    jumps = float(np.sum(integrand(hit))) if hit.size else 0.0
    return jumps - bundle.dt * levy.intensity * levy.mark_mean(integrand)


def brownian_increments(bundles: list[PathBundle]) -> np.ndarray:
    """Stacked ``dB``, shape ``(P, M)``."""
    return np.stack([b.dB for b in bundles])


def compensated_increments(
    bundles: list[PathBundle], levy: LevyModel, integrand: Callable | Polynomial | None = None
) -> np.ndarray:
    """Stacked compensated increments for ``integrand`` (default ``gamma0``), shape ``(P, M)``."""
    P, M = len(bundles), bundles[0].M
    out = np.zeros((P, M))
    if levy.intensity == 0:
        return out
    if integrand is None:
        integrand = levy.gamma0_poly
    for i, b in enumerate(bundles):
        if b.jump_marks.size:
            np.add.at(out[i], b.jump_steps, integrand(b.jump_marks))
    out -= bundles[0].dt * levy.intensity * levy.mark_mean(integrand)
    return out
