"""IMEX time stepping of the forward state and of the derivative process Z.

One step, for every path at once:

    (I - dt A) Y_{m+1} = Y_m + dt b_m + sigma_m dB_m + gamma_core_m dN_m

with ``b, sigma, gamma_core`` evaluated at ``(Y_m, G Y_m, u_m)`` and
``dN_m`` the compensated ``gamma0`` increment of step ``m``. Boundary rows
of the right-hand side carry ``eta(t_{m+1})``; since the boundary rows of
``I - dt A`` are identity rows, the solve reproduces the boundary data.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse.linalg import splu

from .grid import Grid
from .model import ModelSpec
from .noise import PathBundle, brownian_increments, compensated_increments
from .operators import EllipticOperator
from .spacemean import BallKernel, apply_G

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite values or a failed solve; ``info`` carries diagnostics."""

    def __init__(self, message: str, **info):
        super().__init__(message)
        self.info = info


def control_array(u, M: int, N: int) -> np.ndarray:
    """Nodal control values of shape ``(Pc, M, N)`` with ``Pc`` 1 or the path count."""
    if hasattr(u, "nodal"):
        return u.nodal(M, N)
    arr = np.asarray(u, dtype=float)
    if arr.ndim == 0:
        return np.full((1, M, N), float(arr))
    if arr.ndim == 2 and arr.shape == (M, N):
        return arr[None]
    if arr.ndim == 3 and arr.shape[1:] == (M, N):
        return arr
    raise ValueError(f"control of shape {arr.shape} does not fit (M, N) = ({M}, {N})")


def _initial(grid: Grid, xi) -> np.ndarray:
    if callable(xi):
        return grid.node_values(xi)
    return np.broadcast_to(np.asarray(xi, dtype=float), (grid.size,)).copy()


def _boundary_values(grid: Grid, eta, t: float) -> np.ndarray:
    bpts = grid.points[grid.boundary_mask]
    if callable(eta):
        return np.asarray(eta(t, *bpts.T), dtype=float) * np.ones(len(bpts))
    arr = np.asarray(eta, dtype=float)
    if arr.ndim == 0:
        return np.full(len(bpts), float(arr))
    if arr.shape == (grid.size,):
        return arr[grid.boundary_mask]
    raise ValueError("eta must be a scalar, a node field or a callable eta(t, *x)")


@dataclass(eq=False)
class ForwardEnsemble:
    """State trajectories of all paths plus the noise and control that produced them."""

    grid: Grid
    T: float
    Y: np.ndarray  # (P, M+1, N)
    u: np.ndarray  # (Pc, M, N)
    dB: np.ndarray  # (P, M)
    dN: np.ndarray  # (P, M), compensated gamma0 increments
    spec: ModelSpec
    kernel: BallKernel
    op: EllipticOperator
    bundles: list[PathBundle] = field(default_factory=list, repr=False)
    rejected: np.ndarray | None = None

    @property
    def P(self) -> int:
        return self.Y.shape[0]

    @property
    def M(self) -> int:
        return self.Y.shape[1] - 1

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.M + 1)

    def ybar(self, m: int | None = None) -> np.ndarray:
        """Ball average of the state at step ``m`` (all steps when ``m`` is None)."""
        Y = self.Y if m is None else self.Y[:, m]
        return apply_G(Y, self.kernel)

    def control(self, m: int) -> np.ndarray:
        return self.u[:, m]

    @property
    def kept(self) -> np.ndarray:
        if self.rejected is None:
            return np.ones(self.P, dtype=bool)
        return ~self.rejected

    @property
    def deterministic(self) -> bool:
        return not (np.any(self.dB) and self.spec.vol != type(self.spec.vol)()) and not (
            np.any(self.dN) and self.spec.jump != type(self.spec.jump)()
        )


def _factor(op: EllipticOperator, dt: float):
    try:
        return splu(op.stepping_matrix(dt))
    except RuntimeError as exc:  # singular factor
        raise NumericalError(f"factorization of I - dt A failed: {exc}", dt=dt) from exc


def _solve(lu, rhs: np.ndarray, threads: int) -> np.ndarray:
    # rhs: (P, N); splu wants columns
    if threads == 1 or rhs.shape[0] < 256:
        return lu.solve(np.ascontiguousarray(rhs.T)).T
    chunks = np.array_split(np.arange(rhs.shape[0]), threads if threads > 0 else 4)
    with ThreadPoolExecutor(max_workers=None if threads == 0 else threads) as pool:
        parts = list(pool.map(lambda c: lu.solve(np.ascontiguousarray(rhs[c].T)).T, chunks))
    return np.concatenate(parts, axis=0)


def solve_forward(
    grid: Grid,
    op: EllipticOperator,
    spec: ModelSpec,
    u,
    xi,
    eta,
    paths: list[PathBundle],
    kernel: BallKernel,
    threads: int = 1,
    reject: bool = True,
) -> ForwardEnsemble:
    """Advance every path from ``Y(0) = xi`` to ``T``.

    ``u`` is a control field, a scalar, or an array of shape ``(M, N)`` or
    ``(P, M, N)``; step ``m`` uses ``u[:, m]`` (left point). Paths whose
    terminal state leaves S are flagged in ``rejected`` (not removed).
    """
    if not paths:
        raise ValueError("need at least one path")
    if op.grid is not grid or kernel.grid is not grid:
        raise ValueError("operator, kernel and grid must match")
    M, T, N, P = paths[0].M, paths[0].T, grid.size, len(paths)
    dt = T / M
    uu = control_array(u, M, N)
    if uu.shape[0] not in (1, P):
        raise ValueError(f"control carries {uu.shape[0]} paths, ensemble has {P}")
    dB = brownian_increments(paths)
    dN = compensated_increments(paths, spec.levy)
    bmask = grid.boundary_mask
    lu = _factor(op, dt)

    Y = np.empty((P, M + 1, N))
    Y[:, 0] = _initial(grid, xi)
    Y[:, 0, bmask] = _boundary_values(grid, eta, 0.0)
    drift, vol, jump = spec.drift, spec.vol, spec.jump
    for m in range(M):
        y = Y[:, m]
        yb = apply_G(y, kernel)
        um = uu[:, m]
        rhs = y + dt * drift(y, yb, um)
        if vol.y or vol.yb or vol.u or vol.const:
            rhs += vol(y, yb, um) * dB[:, m, None]
        if spec.levy.intensity > 0 and (jump.y or jump.yb or jump.u or jump.const):
            rhs += jump(y, yb, um) * dN[:, m, None]
        rhs[:, bmask] = _boundary_values(grid, eta, (m + 1) * dt)
        nxt = _solve(lu, rhs, threads)
        nxt[:, bmask] = rhs[:, bmask]
        if not np.all(np.isfinite(nxt)):
            bad = np.flatnonzero(~np.all(np.isfinite(nxt), axis=1))
            raise NumericalError(
                f"non-finite state at step {m + 1} on {bad.size} path(s)", step=m + 1, paths=bad[:10].tolist()
            )
        Y[:, m + 1] = nxt

    rejected = None
    if reject:
        rejected = ~np.all(spec.in_S(Y[:, -1]), axis=1)
        if rejected.any():
            log.warning("%d of %d paths end outside S", int(rejected.sum()), P)
    return ForwardEnsemble(grid, T, Y, uu, dB, dN, spec, kernel, op, list(paths), rejected)


def solve_derivative_Z(
    grid: Grid,
    op: EllipticOperator,
    spec: ModelSpec,
    direction,
    base: ForwardEnsemble,
    threads: int = 1,
) -> np.ndarray:
    """Linearization of the forward scheme along a control direction.

    Returns ``Z`` of shape ``(P, M+1, N)`` with ``Z(0) = 0`` and ``Z = 0`` on
    the boundary. The dynamics are affine in ``(y, ybar, u)``, so the
    coefficients do not depend on the base state; ``base`` supplies the
    noise and the time grid.
    """
    M, N, P, dt = base.M, grid.size, base.P, base.dt
    v = control_array(direction, M, N)
    lu = _factor(op, dt)
    bmask = grid.boundary_mask
    drift, vol, jump = spec.drift, spec.vol, spec.jump
    Z = np.zeros((P, M + 1, N))
    for m in range(M):
        z = Z[:, m]
        zb = apply_G(z, base.kernel)
        vm = v[:, m]
        rhs = z + dt * (drift.y * z + drift.yb * zb + drift.u * vm)
        rhs = rhs + (vol.y * z + vol.yb * zb + vol.u * vm) * base.dB[:, m, None]
        if spec.levy.intensity > 0:
            rhs = rhs + (jump.y * z + jump.yb * zb + jump.u * vm) * base.dN[:, m, None]
        rhs[:, bmask] = 0.0
        nxt = _solve(lu, rhs, threads)
        nxt[:, bmask] = 0.0
        if not np.all(np.isfinite(nxt)):
            raise NumericalError(f"non-finite derivative process at step {m + 1}", step=m + 1)
        Z[:, m + 1] = nxt
    return Z


def heat_amplitude(t: float, scale: float = 0.5) -> float:
    """Decay factor of the first sine mode under ``scale * Laplacian`` on (0, 1)."""
    return float(np.exp(-scale * np.pi**2 * t))
