"""Backward sweeps for the adjoint equation and the Picard iteration.

The discrete backward relation mirrors the forward IMEX step. With
``S = (I - dt A*)^{-1}`` and ``P0`` zeroing the boundary rows,

    lam_{m+1} = p_{m+1} + dt D_{m+1}(p_{m+1}, q_{m+1}, c_r{m+1})
    p_m   = P0 S E_m[lam_{m+1}]
    q_m   = P0 S E_m[lam_{m+1} dB_m] / dt
    c_r m = P0 S E_m[lam_{m+1} dN_m] / (dt m2)

where ``D`` is the driver, ``dN`` the compensated ``gamma0`` increment and
``m2 = int gamma0^2 dnu``. The terminal row ``p_M`` is stored as given and
the driver is not evaluated at ``t_M``. When ``A*`` is the discrete
transpose of the forward ``A`` and the driver is the Hamiltonian one,
``dt * dH/du(p_m, q_m, c_r m)`` is the exact derivative of the discrete
performance functional with respect to ``u_m``.

Conditional expectations ``E_m`` are per-node least-squares regressions on
``(1, Y, Ybar, Y^2, Y Ybar, Ybar^2)`` at step ``m``; in the zero-noise
regime they reduce to the identity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse.linalg import splu

from .forward import ForwardEnsemble, NumericalError
from .grid import Grid
from .model import HamiltonianInputs, ModelSpec, dH_dy, dH_dybar
from .noise import levy_moments
from .operators import EllipticOperator
from .spacemean import EXACT, BallKernel, apply_G, averaged_dual

log = logging.getLogger(__name__)

P_ARGS = frozenset({"p"})
QR_ARGS = frozenset({"q", "cr"})


@dataclass(eq=False)
class AdjointTriple:
    """``p, q, c_r`` on the space-time grid, shape ``(P, M+1, N)`` each."""

    grid: Grid
    T: float
    p: np.ndarray
    q: np.ndarray
    cr: np.ndarray
    deficient: int = 0  # regressions that fell back to the sample mean

    @property
    def M(self) -> int:
        return self.p.shape[1] - 1

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.M + 1)


# drivers ----------------------------------------------------------------


class Driver:
    """``D(m, p, q, cr)`` on arrays of shape ``(P, N)``; ``depends_on`` lists used arguments."""

    depends_on: frozenset = frozenset()

    def __call__(self, m: int, p: np.ndarray, q: np.ndarray, cr: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ZeroDriver(Driver):
    def __call__(self, m, p, q, cr):
        return np.zeros_like(p)


@dataclass(eq=False)
class LinearDriver(Driver):
    """``a_p p + a_pbar G p + a_q q + a_qbar G q + a_cr c_r + a_crbar G c_r + source``.

    ``source`` is a constant, a node field, or a callable ``source(m)``.
    """

    kernel: BallKernel | None = None
    a_p: float = 0.0
    a_pbar: float = 0.0
    a_q: float = 0.0
    a_qbar: float = 0.0
    a_cr: float = 0.0
    a_crbar: float = 0.0
    source: float | np.ndarray | Callable = 0.0

    def __post_init__(self):
        if self.kernel is None and (self.a_pbar or self.a_qbar or self.a_crbar):
            raise ValueError("averaged terms need a kernel")
        deps = set()
        if self.a_p or self.a_pbar:
            deps.add("p")
        if self.a_q or self.a_qbar:
            deps.add("q")
        if self.a_cr or self.a_crbar:
            deps.add("cr")
        self.depends_on = frozenset(deps)

    def _term(self, a, abar, v):
        out = a * v if a else 0.0
        if abar:
            out = out + abar * apply_G(v, self.kernel)
        return out

    def __call__(self, m, p, q, cr):
        src = self.source(m) if callable(self.source) else self.source
        out = np.zeros_like(p) + src
        out = out + self._term(self.a_p, self.a_pbar, p)
        out = out + self._term(self.a_q, self.a_qbar, q)
        return out + self._term(self.a_cr, self.a_crbar, cr)


@dataclass(eq=False)
class HamiltonianDriver(Driver):
    """``dH/dy + averaged_dual(dH/dybar)`` along a forward ensemble."""

    spec: ModelSpec
    kernel: BallKernel
    forward: ForwardEnsemble
    mode: str = EXACT

    def __post_init__(self):
        s = self.spec
        deps = set()
        if s.drift.y or s.drift.yb:
            deps.add("p")
        if s.vol.y or s.vol.yb:
            deps.add("q")
        if (s.jump.y or s.jump.yb) and s.m2:
            deps.add("cr")
        # running-cost slopes enter as a source
        self.depends_on = frozenset(deps)

    def __call__(self, m, p, q, cr):
        fw = self.forward
        y = fw.Y[:, m]
        yb = apply_G(y, self.kernel)
        u = fw.u[:, min(m, fw.M - 1)]
        inp = HamiltonianInputs(y, yb, u, p, q, cr)
        t = m * fw.dt
        x = fw.grid.points
        slope = dH_dybar(self.spec, t, x, inp)
        return dH_dy(self.spec, t, x, inp) + averaged_dual(slope, self.kernel, self.mode)


# regression ---------------------------------------------------------------


def _features(y: np.ndarray, yb: np.ndarray) -> np.ndarray:
    """Centered, scaled quadratic features, shape ``(P, N, 5)`` (constant handled separately)."""
    X = np.stack([y, yb, y * y, y * yb, yb * yb], axis=-1)
    X = X - X.mean(axis=0)
    scale = np.sqrt((X * X).mean(axis=0))
    ok = scale > 1e-12 * np.maximum(1.0, np.abs(np.stack([y, yb, y * y, y * yb, yb * yb], -1)).max(axis=0))
    X = np.where(ok, X / np.where(ok, scale, 1.0), 0.0)
    return X


class Regressor:
    """Per-node least squares of path samples on the step-``m`` features.

    Uses the eigen-decomposed normal equations; directions with eigenvalue
    below ``cutoff * largest`` are dropped, so constant features reduce the
    fit to the sample mean.
    """

    def __init__(self, y: np.ndarray, yb: np.ndarray, cutoff: float = 1e-10):
        self.P = y.shape[0]
        X = _features(y, yb)
        gram = np.einsum("pnk,pnl->nkl", X, X) / self.P
        w, V = np.linalg.eigh(gram)
        top = w.max(axis=1, keepdims=True)
        keep = w > cutoff * np.maximum(top, 1e-300)
        inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
        self.pinv = np.einsum("nkj,nj,nlj->nkl", V, inv, V)
        self.X = X
        self.rank = keep.sum(axis=1)
        # full rank of the centered design is 5; anything less counts as a fallback
        self.deficient = int(np.count_nonzero(self.rank < X.shape[-1]))

    def __call__(self, target: np.ndarray) -> np.ndarray:
        mean = target.mean(axis=0)
        resid = target - mean
        rhs = np.einsum("pnk,pn->nk", self.X, resid) / self.P
        coef = np.einsum("nkl,nl->nk", self.pinv, rhs)
        return mean + np.einsum("pnk,nk->pn", self.X, coef)


# solvers ------------------------------------------------------------------


class _BackStepper:
    def __init__(self, op_adjoint: EllipticOperator, dt: float):
        self.grid = op_adjoint.grid
        try:
            self.lu = splu(op_adjoint.stepping_matrix(dt))
        except RuntimeError as exc:
            raise NumericalError(f"factorization of I - dt A* failed: {exc}", dt=dt) from exc
        self.bmask = self.grid.boundary_mask

    def __call__(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.array(rhs, dtype=float, copy=True)
        rhs[:, self.bmask] = 0.0
        out = self.lu.solve(np.ascontiguousarray(rhs.T)).T
        out[:, self.bmask] = 0.0
        return out


def _terminal_array(terminal, P: int, N: int) -> np.ndarray:
    arr = np.asarray(terminal, dtype=float)
    if arr.ndim == 0:
        arr = np.full(N, float(arr))
    return np.broadcast_to(arr, (P, N)).copy()


def _check_finite(arr: np.ndarray, m: int, name: str):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {name} at step {m}", step=m)


def solve_bspde_deterministic(
    grid: Grid,
    op_adjoint: EllipticOperator,
    driver: Driver | Callable,
    terminal,
    M: int,
    T: float,
    frozen: AdjointTriple | None = None,
) -> AdjointTriple:
    """Zero-noise backward sweep; ``q`` and ``c_r`` stay 0.

    ``frozen`` (used by the Picard loop) supplies the arguments at which the
    driver is evaluated; by default the driver sees the current iterate.
    """
    N = grid.size
    dt = T / M
    step = _BackStepper(op_adjoint, dt)
    p = np.zeros((1, M + 1, N))
    p[:, M] = _terminal_array(terminal, 1, N)
    zeros = np.zeros((1, N))
    for m in range(M - 1, -1, -1):
        lam = p[:, m + 1].copy()
        if m + 1 < M:
            if frozen is None:
                lam += dt * driver(m + 1, p[:, m + 1], zeros, zeros)
            else:
                lam += dt * driver(m + 1, frozen.p[:, m + 1], frozen.q[:, m + 1], frozen.cr[:, m + 1])
        p[:, m] = step(lam)
        _check_finite(p[:, m], m, "p")
    return AdjointTriple(grid, T, p, np.zeros_like(p), np.zeros_like(p))


def solve_bspde_regression(
    grid: Grid,
    op_adjoint: EllipticOperator,
    driver: Driver | Callable,
    forward: ForwardEnsemble,
    terminal,
    frozen: AdjointTriple | None = None,
    cutoff: float = 1e-10,
) -> AdjointTriple:
    """Monte Carlo backward sweep with regression conditional expectations.

    ``terminal`` is a node field or per-path array ``(P, N)``. Rejected
    forward paths still take part (their terminal is whatever was passed).
    """
    P, M, N, dt = forward.P, forward.M, grid.size, forward.dt
    step = _BackStepper(op_adjoint, dt)
    m2 = levy_moments(forward.spec.levy).m2
    p = np.zeros((P, M + 1, N))
    q = np.zeros_like(p)
    cr = np.zeros_like(p)
    p[:, M] = _terminal_array(terminal, P, N)
    deficient = 0
    for m in range(M - 1, -1, -1):
        lam = p[:, m + 1].copy()
        if m + 1 < M:
            src = frozen if frozen is not None else None
            args = (
                (src.p[:, m + 1], src.q[:, m + 1], src.cr[:, m + 1])
                if src is not None
                else (p[:, m + 1], q[:, m + 1], cr[:, m + 1])
            )
            lam += dt * driver(m + 1, *args)
        y = forward.Y[:, m]
        reg = Regressor(y, apply_G(y, forward.kernel), cutoff)
        deficient += reg.deficient
        pre = reg(lam)
        resid = lam - pre
        dB = forward.dB[:, m, None]
        q_pre = reg(resid * dB) / dt
        p[:, m] = step(pre)
        q[:, m] = step(q_pre)
        if m2 > 0:
            dN = forward.dN[:, m, None]
            cr[:, m] = step(reg(resid * dN) / (dt * m2))
        _check_finite(p[:, m], m, "p")
        _check_finite(q[:, m], m, "q")
    if deficient:
        log.info("regression fell back to the mean at %d node-steps", deficient)
    return AdjointTriple(grid, forward.T, p, q, cr, deficient)


# Picard -------------------------------------------------------------------


@dataclass
class PicardTrace:
    dp: list[float] = field(default_factory=list)
    dq: list[float] = field(default_factory=list)
    dr: list[float] = field(default_factory=list)
    inner: list[int] = field(default_factory=list)
    step: int = 0  # which construction of the existence proof was used (0, 1 or 2)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.dp)

    @property
    def total(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.dp) ** 2 + np.asarray(self.dq) ** 2 + np.asarray(self.dr) ** 2)

    @property
    def ratios(self) -> np.ndarray:
        d = self.total
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.concatenate([[np.nan], d[1:] / d[:-1]]) if d.size else d

    def geometric_slope(self, start: int = 1) -> float:
        """Slope of ``log(diff)`` against iteration index (negative means decay)."""
        d = self.total[start:]
        d = d[d > 0]
        if d.size < 2:
            return float("nan")
        return float(np.polyfit(np.arange(d.size), np.log(d), 1)[0])

    def rows(self):
        r = self.ratios
        for n in range(self.iterations):
            yield n + 1, self.dp[n], self.dq[n], self.dr[n], r[n]


def _time_norm(grid: Grid, a: np.ndarray, dt: float) -> float:
    """``sqrt(mean over paths of sum_m dt |a_m|_H^2)``."""
    return float(np.sqrt(np.mean(np.sum(grid.integrate(a * a), axis=-1) * dt)))


def picard_solve(
    grid: Grid,
    op_adjoint: EllipticOperator,
    driver: Driver,
    terminal,
    n_max: int = 50,
    tol: float = 1e-10,
    forward: ForwardEnsemble | None = None,
    M: int | None = None,
    T: float | None = None,
    initial: str = "zero",
) -> tuple[AdjointTriple, PicardTrace]:
    """Picard iteration with frozen driver arguments.

    A driver using none of ``(p, q, c_r)`` is solved once. A driver free of
    ``p`` iterates on ``(q, c_r)`` only. Otherwise the outer loop freezes
    ``p`` and an inner loop iterates ``(q, c_r)`` to ``min(tol / 10, 1e-3 * last outer
    difference)``. Without a
    forward ensemble the zero-noise sweep is used (``M`` and ``T`` needed).

    ``initial`` picks ``p^0``: ``"zero"`` or ``"terminal"`` (the terminal
    value held constant in time).
    """
    if forward is not None:
        P, M, T = forward.P, forward.M, forward.T

        def solve(frozen):
            return solve_bspde_regression(grid, op_adjoint, driver, forward, terminal, frozen=frozen)
    else:
        if M is None or T is None:
            raise ValueError("zero-noise Picard needs M and T")
        P = 1

        def solve(frozen):
            return solve_bspde_deterministic(grid, op_adjoint, driver, terminal, M, T, frozen=frozen)

    N, dt = grid.size, T / M
    deps = getattr(driver, "depends_on", frozenset({"p", "q", "cr"}))
    trace = PicardTrace()
    zero = np.zeros((P, M + 1, N))

    if not deps:
        sol = solve(AdjointTriple(grid, T, zero, zero, zero))
        trace.step, trace.converged = 0, True
        trace.dp.append(_time_norm(grid, sol.p, dt))
        trace.dq.append(_time_norm(grid, sol.q, dt))
        trace.dr.append(_time_norm(grid, sol.cr, dt))
        trace.inner.append(1)
        return sol, trace

    if initial == "zero":
        p0 = zero.copy()
    elif initial == "terminal":
        p0 = np.broadcast_to(_terminal_array(terminal, P, N)[:, None, :], (P, M + 1, N)).copy()
    else:
        raise ValueError(f"unknown initial guess {initial!r}")

    def inner_loop(p_frozen, q, cr, cap, eps, record):
        """Iterate (q, c_r) with p frozen; returns the last solve and the count."""
        sol = None
        for k in range(1, cap + 1):
            new = solve(AdjointTriple(grid, T, p_frozen, q, cr))
            if record is not None:
                prev_p = sol.p if sol is not None else p_frozen
                record(new.p - prev_p, new.q - q, new.cr - cr)
            dq = _time_norm(grid, new.q - q, dt)
            dr = _time_norm(grid, new.cr - cr, dt)
            sol, q, cr = new, new.q, new.cr
            if not QR_ARGS & deps or max(dq, dr) < eps:
                return sol, k, True
        return sol, cap, False

    def push(dp, dq, dr):
        trace.dp.append(_time_norm(grid, dp, dt))
        trace.dq.append(_time_norm(grid, dq, dt))
        trace.dr.append(_time_norm(grid, dr, dt))

    if "p" not in deps:
        # iterate (q, c_r) directly
        trace.step = 1

        def record(dp, dq, dr):
            push(dp, dq, dr)
            trace.inner.append(1)

        sol, _, ok = inner_loop(p0, zero, zero, n_max, tol, record)
        trace.converged = ok
        return sol, trace

    trace.step = 2
    p, q, cr = p0, zero, zero
    sol = None
    for _ in range(n_max):
        # inner truncation error must stay well below the outer differences,
        # otherwise the outer trace flattens at the inner tolerance
        eps = 0.1 * tol if not trace.dp else min(0.1 * tol, 1e-3 * float(trace.total[-1]))
        sol, k, _ok = inner_loop(p, q, cr, n_max, eps, None)
        push(sol.p - p, sol.q - q, sol.cr - cr)
        trace.inner.append(k)
        p, q, cr = sol.p, sol.q, sol.cr
        if trace.total[-1] < tol:
            trace.converged = True
            break
    if not trace.converged:
        log.warning("Picard iteration stopped after %d iterations (last diff %.3g)", n_max, trace.total[-1])
    return sol, trace
