"""Performance functional, maximum-principle control updates and their checks.

The discrete functional is

    J(u) = E[ sum_{m<M} dt int_D f(Y_m, Ybar_m, u_m) dx + int_D g(Y_M, Ybar_M) dx ]

with the grid quadrature. The backward sweep in :mod:`smspde.backward`
is built so that its ``p_m`` gives the exact gradient
``dJ/du_m = dt * W * dH/du(p_m, q_m, c_r m)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .backward import (
    AdjointTriple,
    HamiltonianDriver,
    solve_bspde_deterministic,
    solve_bspde_regression,
)
from .forward import ForwardEnsemble, NumericalError, control_array, solve_derivative_Z, solve_forward
from .grid import Grid
from .model import Affine, HamiltonianInputs, ModelSpec, dH_du, terminal_slope
from .noise import PathBundle, sample_paths
from .operators import EllipticOperator, transpose_operator, assemble_adjoint
from .spacemean import EXACT, BallKernel, apply_G, apply_G_dual

log = logging.getLogger(__name__)

POINTWISE = "pointwise"
XFREE = "xfree"
CONSTANT = "constant"
MODES = (POINTWISE, XFREE, CONSTANT)


@dataclass(eq=False)
class ControlField:
    """Control values on the left time points ``t_0 .. t_{M-1}``.

    pointwise: ``(Pc, M, N)``; xfree: ``(Pc, M)``; constant: a scalar.
    ``Pc`` is 1 for deterministic controls or the path count for feedback ones.
    """

    mode: str
    values: np.ndarray
    u_min: float = 0.0
    u_max: float = np.inf
    clamped: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown control mode {self.mode!r}")
        v = np.asarray(self.values, dtype=float)
        if self.mode == POINTWISE and v.ndim == 2:
            v = v[None]
        if self.mode == XFREE and v.ndim == 1:
            v = v[None]
        want = {POINTWISE: 3, XFREE: 2, CONSTANT: 0}[self.mode]
        if v.ndim != want:
            raise ValueError(f"{self.mode} control needs {want} axes, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("control values must be finite")
        self.values = v

    @classmethod
    def constant(cls, value: float, spec: ModelSpec) -> ControlField:
        return cls(CONSTANT, float(value), spec.u_min, spec.u_max)

    @classmethod
    def initial(cls, mode: str, value: float, spec: ModelSpec, M: int, N: int) -> ControlField:
        value = float(np.clip(value, spec.u_min, spec.u_max))
        if mode == POINTWISE:
            return cls(mode, np.full((1, M, N), value), spec.u_min, spec.u_max)
        if mode == XFREE:
            return cls(mode, np.full((1, M), value), spec.u_min, spec.u_max)
        return cls(mode, value, spec.u_min, spec.u_max)

    def nodal(self, M: int, N: int) -> np.ndarray:
        v = self.values
        if self.mode == POINTWISE:
            if v.shape[1:] != (M, N):
                raise ValueError(f"control shape {v.shape} does not fit (M, N) = ({M}, {N})")
            return v
        if self.mode == XFREE:
            if v.shape[1] != M:
                raise ValueError(f"control has {v.shape[1]} steps, expected {M}")
            return np.repeat(v[:, :, None], N, axis=2)
        return np.full((1, M, N), float(v))

    def in_U(self, slack: float = 1e-12) -> bool:
        scale = max(1.0, abs(self.u_min), abs(self.u_max) if np.isfinite(self.u_max) else 1.0)
        return bool(np.all(self.values >= self.u_min - slack * scale) and np.all(self.values <= self.u_max + slack * scale))

    def blend(self, other: ControlField, omega: float) -> ControlField:
        if other.mode != self.mode:
            raise ValueError("cannot blend controls of different modes")
        a, b = np.broadcast_arrays(self.values, other.values)
        return ControlField(self.mode, (1.0 - omega) * a + omega * b, self.u_min, self.u_max)

    def shifted(self, theta: float, direction: ControlField) -> ControlField:
        a, b = np.broadcast_arrays(self.values, direction.values)
        return ControlField(self.mode, a + theta * b, self.u_min, self.u_max)

    def table(self, grid: Grid, T: float):
        """Rows ``(t, x..., u)`` of path 0 (pointwise), ``(t, u)`` otherwise."""
        if self.mode == CONSTANT:
            return [(0.0, float(self.values))]
        M = self.values.shape[1]
        times = np.arange(M) * (T / M)
        if self.mode == XFREE:
            return [(t, u) for t, u in zip(times, self.values[0])]
        pts = grid.points
        return [(t, *pts[i], self.values[0, m, i]) for m, t in enumerate(times) for i in range(grid.size)]


def as_control(u, spec: ModelSpec) -> ControlField:
    if isinstance(u, ControlField):
        return u
    arr = np.asarray(u, dtype=float)
    if arr.ndim == 0:
        return ControlField(CONSTANT, float(arr), spec.u_min, spec.u_max)
    if arr.ndim in (1,):
        return ControlField(XFREE, arr, spec.u_min, spec.u_max)
    return ControlField(POINTWISE, arr, spec.u_min, spec.u_max)


# problem bundle -------------------------------------------------------------


@dataclass(eq=False)
class HarvestProblem:
    """Everything one forward/backward pass needs, with a fixed set of noise paths.

    ``adjoint_op`` is ``"transpose"`` (discrete transpose of ``op``, exact
    gradients) or ``"analytic"`` (formal adjoint assembled from the
    coefficient descriptors of ``op``).
    """

    grid: Grid
    op: EllipticOperator
    kernel: BallKernel
    spec: ModelSpec
    xi: object
    eta: object
    T: float
    M: int
    P: int = 1
    seed: int = 0
    dual_mode: str = EXACT
    adjoint_op: str = "transpose"
    threads: int = 1

    @property
    def stochastic(self) -> bool:
        s = self.spec
        brownian = s.vol != Affine()
        jumps = s.levy.intensity > 0 and s.jump != Affine()
        return brownian or jumps

    @property
    def dt(self) -> float:
        return self.T / self.M

    @cached_property
    def paths(self) -> list[PathBundle]:
        P = self.P if self.stochastic else 1
        return sample_paths(self.M, self.T, self.spec.levy, P, self.seed, self.threads)

    @cached_property
    def op_adjoint(self) -> EllipticOperator:
        if self.adjoint_op == "transpose":
            return transpose_operator(self.op)
        if self.adjoint_op == "analytic":
            d = self.op.descriptors
            return assemble_adjoint(self.grid, d["alpha"], d["beta"], d["c"])
        raise ValueError(f"unknown adjoint operator choice {self.adjoint_op!r}")

    def forward(self, u) -> ForwardEnsemble:
        return solve_forward(
            self.grid, self.op, self.spec, u, self.xi, self.eta, self.paths, self.kernel, self.threads
        )

    def adjoint(self, fw: ForwardEnsemble) -> AdjointTriple:
        yT = fw.Y[:, -1]
        # rejected paths get a placeholder state; they are excluded from J
        safe = np.where(fw.kept[:, None], yT, 1.0)
        dgy, dgyb = terminal_slope(self.spec, self.grid.points, safe, apply_G(safe, self.kernel))
        terminal = dgy + apply_G_dual(dgyb, self.kernel)
        driver = HamiltonianDriver(self.spec, self.kernel, fw, self.dual_mode)
        if self.stochastic:
            return solve_bspde_regression(self.grid, self.op_adjoint, driver, fw, terminal)
        return solve_bspde_deterministic(self.grid, self.op_adjoint, driver, terminal, self.M, self.T)


# performance functional -----------------------------------------------------


@dataclass
class JEstimate:
    mean: float
    stderr: float
    rejected: int
    per_path: np.ndarray = field(repr=False, default=None)


def eval_J(spec: ModelSpec, u, ensemble: ForwardEnsemble) -> JEstimate:
    """Monte Carlo mean of the discrete performance functional over retained paths."""
    fw = ensemble
    grid, M, dt = fw.grid, fw.M, fw.dt
    kept = fw.kept
    if not kept.any():
        raise ValueError("all paths rejected: terminal state outside S")
    uu = control_array(u, M, grid.size) if u is not None else fw.u
    x = grid.points
    Y = fw.Y[kept]
    Yb = apply_G(Y, fw.kernel)
    U = uu if uu.shape[0] == 1 else uu[kept]
    run = np.zeros(Y.shape[0])
    for m in range(M):
        run += dt * grid.integrate(spec.f(m * dt, x, Y[:, m], Yb[:, m], U[:, m]))
    term = grid.integrate(spec.g(x, Y[:, M], Yb[:, M]))
    per = run + term
    n = per.size
    se = float(per.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return JEstimate(float(per.mean()), se, int((~kept).sum()), per)


# control updates ------------------------------------------------------------


def _hu(spec: ModelSpec, adj: AdjointTriple, fw: ForwardEnsemble, uu: np.ndarray) -> np.ndarray:
    """``dH/du`` at every (path, m < M, node)."""
    M = fw.M
    Yb = fw.ybar()
    inp = HamiltonianInputs(fw.Y[:, :M], Yb[:, :M], uu, adj.p[:, :M], adj.q[:, :M], adj.cr[:, :M])
    return dH_du(spec, 0.0, fw.grid.points, inp)


def update_pointwise(
    spec: ModelSpec,
    adjoint: AdjointTriple,
    current: ControlField | None = None,
    forward: ForwardEnsemble | None = None,
    step: float = 0.1,
) -> ControlField:
    """Stationary control ``argmax_u H`` per node, projected onto U.

    Presets use the closed form on interior nodes. On boundary nodes the
    adjoint vanishes, so ``H`` reduces to the increasing utility and the
    maximizer is ``u_max``. Other models take one projected-gradient step
    from ``current`` (which then needs ``forward``).
    """
    grid = adjoint.grid
    M = adjoint.M
    p = adjoint.p[:, :M]
    inner = grid.interior_mask
    probe = spec.stationary_control(np.ones(1))
    if probe is not None:
        if np.any(p[:, :, inner] <= 0):
            raise ValueError("adjoint p must be positive on interior nodes")
        raw = np.full(p.shape, spec.u_max)
        raw[:, :, inner] = spec.stationary_control(p[:, :, inner])
    else:
        if current is None or forward is None:
            raise ValueError("gradient update needs the current control and its forward run")
        uu = control_array(current, M, grid.size)
        raw = uu + step * _hu(spec, adjoint, forward, uu)
    out = spec.project(raw)
    clamped = int(np.count_nonzero(out[:, :, inner] != raw[:, :, inner]))
    return ControlField(POINTWISE, out, spec.u_min, spec.u_max, clamped)


def _bisect(fun, lo: np.ndarray, hi: np.ndarray, iters: int = 200) -> np.ndarray:
    flo = fun(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = fun(mid)
        left = np.sign(fm) == np.sign(flo)
        lo = np.where(left, mid, lo)
        flo = np.where(left, fm, flo)
        hi = np.where(left, hi, mid)
    return 0.5 * (lo + hi)


def update_xfree(
    spec: ModelSpec,
    adjoint: AdjointTriple,
    forward: ForwardEnsemble | None = None,
) -> ControlField:
    """Control depending on time only: solve ``int_D dH/du dx = 0`` per (path, t).

    Presets use the closed form (``|D| / int p`` for log utility); other
    models bisect on U (``forward`` needed).
    """
    grid = adjoint.grid
    M = adjoint.M
    integral = grid.integrate(adjoint.p[:, :M])  # (P, M)
    vol = float(grid.weights.sum())
    if spec.stationary_control_xfree(1.0, 1.0) is not None:
        if np.any(integral <= 0):
            raise ValueError("integral of p over D must be positive")
        raw = spec.stationary_control_xfree(integral, vol)
    else:
        if forward is None or not np.isfinite(spec.u_max):
            raise ValueError("bisection needs the forward run and a finite u_max")
        N = grid.size

        def g(uval):
            uu = np.repeat(uval[:, :, None], N, axis=2)
            return grid.integrate(_hu(spec, adjoint, forward, uu))

        lo = np.full(integral.shape, spec.u_min)
        hi = np.full(integral.shape, spec.u_max)
        raw = _bisect(g, lo, hi)
    out = spec.project(raw)
    return ControlField(XFREE, out, spec.u_min, spec.u_max, int(np.count_nonzero(out != raw)))


def update_constant(spec: ModelSpec, adjoint: AdjointTriple, forward: ForwardEnsemble | None = None) -> ControlField:
    """Single constant control: ``E sum_m dt int_D dH/du dx = 0``."""
    grid = adjoint.grid
    M, dt = adjoint.M, adjoint.dt
    kept = forward.kept if forward is not None else np.ones(adjoint.p.shape[0], dtype=bool)
    total = float(np.mean(np.sum(grid.integrate(adjoint.p[kept, :M]), axis=1) * dt))
    vol = float(grid.weights.sum()) * adjoint.T
    if spec.stationary_control_xfree(1.0, 1.0) is not None:
        raw = spec.stationary_control_xfree(total, vol)
    else:
        if forward is None or not np.isfinite(spec.u_max):
            raise ValueError("bisection needs the forward run and a finite u_max")
        N = grid.size

        def g(uval):
            uu = np.full((1, M, N), float(uval[0]))
            return np.array([np.mean(np.sum(grid.integrate(_hu(spec, adjoint, forward, uu)[kept]), axis=1))])

        raw = float(_bisect(g, np.array([spec.u_min]), np.array([spec.u_max]))[0])
    out = float(spec.project(raw))
    return ControlField(CONSTANT, out, spec.u_min, spec.u_max, int(out != raw))


UPDATES = {POINTWISE: update_pointwise, XFREE: update_xfree, CONSTANT: update_constant}


def stationarity_residual(
    spec: ModelSpec, u: ControlField, adjoint: AdjointTriple, forward: ForwardEnsemble
) -> tuple[float, float]:
    """Absolute and relative stationarity residual for the control's mode.

    pointwise: ``sup |dH/du|`` over interior nodes; xfree: ``sup_t |int_D dH/du|``;
    constant: ``|E sum_m dt int_D dH/du|``. The relative value divides by the
    same functional applied to ``|p|``.
    """
    grid = forward.grid
    hu = _hu(spec, adjoint, forward, forward.u)
    p = np.abs(adjoint.p[:, : forward.M])
    if u.mode == POINTWISE:
        inner = grid.interior_mask
        r = float(np.abs(hu[:, :, inner]).max())
        scale = float(p[:, :, inner].max())
    elif u.mode == XFREE:
        r = float(np.abs(grid.integrate(hu)).max())
        scale = float(grid.integrate(p).max())
    else:
        kept = forward.kept
        r = abs(float(np.mean(np.sum(grid.integrate(hu[kept] if hu.shape[0] > 1 else hu), axis=1)) * forward.dt))
        scale = float(np.mean(np.sum(grid.integrate(p), axis=1)) * forward.dt)
    return r, r / scale if scale > 0 else np.inf


# optimizer ------------------------------------------------------------------


@dataclass
class OptimizerReport:
    iterations: int
    J_trace: list[float]
    residual: float
    relative_residual: float
    converged: bool
    mode: str
    residual_trace: list[float] = field(default_factory=list)
    stderr: float = 0.0
    rejected: int = 0
    clamped: int = 0
    status: str = "ok"

    @property
    def monotone_after(self) -> int | None:
        """First iteration from which the J trace never decreases (None if it ends decreasing)."""
        J = np.asarray(self.J_trace)
        if J.size < 2:
            return 1
        drops = np.flatnonzero(np.diff(J) < -1e-12 * np.maximum(1.0, np.abs(J[1:])))
        return int(drops[-1] + 2) if drops.size else 1

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "J_trace": [float(j) for j in self.J_trace],
            "residual": float(self.residual),
            "relative_residual": float(self.relative_residual),
            "converged": bool(self.converged),
            "mode": self.mode,
            "residual_trace": [float(r) for r in self.residual_trace],
            "stderr": float(self.stderr),
            "rejected": int(self.rejected),
            "clamped": int(self.clamped),
            "monotone_after": self.monotone_after,
            "status": self.status,
        }


@dataclass
class OptimizerResult:
    control: ControlField
    report: OptimizerReport
    forward: ForwardEnsemble | None = None
    adjoint: AdjointTriple | None = None


def optimize(
    problem: HarvestProblem,
    mode: str = POINTWISE,
    u0: float = 1.0,
    omega: float = 0.5,
    tol: float = 1e-6,
    max_iter: int = 200,
    relative: bool = False,
) -> OptimizerResult:
    """Damped fixed point ``u <- (1 - omega) u + omega argmax H(p(u))``.

    Stops when the stationarity residual (relative if ``relative``) drops
    below ``tol``; the returned control is the one the residual was measured at.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if not 0 < omega <= 1:
        raise ValueError("relaxation omega must lie in (0, 1]")
    spec, grid = problem.spec, problem.grid
    u = ControlField.initial(mode, u0, spec, problem.M, grid.size)
    J_trace, res_trace = [], []
    report = OptimizerReport(0, J_trace, np.inf, np.inf, False, mode, res_trace)
    fw = adj = None
    for it in range(1, max_iter + 1):
        fw = problem.forward(u)
        J = eval_J(spec, u, fw)
        J_trace.append(J.mean)
        report.stderr, report.rejected = J.stderr, J.rejected
        if not np.isfinite(J.mean):
            report.status = "diverged"
            raise NumericalError("J became non-finite", report=report.to_json())
        adj = problem.adjoint(fw)
        r_abs, r_rel = stationarity_residual(spec, u, adj, fw)
        res_trace.append(r_rel if relative else r_abs)
        report.iterations, report.residual, report.relative_residual = it, r_abs, r_rel
        if (r_rel if relative else r_abs) < tol:
            report.converged = True
            break
        if it == max_iter:
            break
        if mode == POINTWISE:
            new = update_pointwise(spec, adj, u, fw)
        else:
            new = UPDATES[mode](spec, adj, fw)
        report.clamped = new.clamped
        u = u.blend(new, omega)
    if not report.converged:
        report.status = "iteration cap"
    return OptimizerResult(u, report, fw, adj)


# verification -----------------------------------------------------------------


@dataclass
class GradientCheck:
    thetas: list[float]
    finite_difference: list[float]
    adjoint_form: float
    z_form: float
    gaps: dict
    direction_norm: float

    def to_json(self) -> dict:
        return {
            "thetas": self.thetas,
            "finite_difference": self.finite_difference,
            "adjoint_form": self.adjoint_form,
            "z_form": self.z_form,
            "gaps": self.gaps,
            "direction_norm": self.direction_norm,
        }


def _rel_gap(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


def directional_derivative_check(
    problem: HarvestProblem,
    u_hat: ControlField,
    direction,
    thetas=(1e-3,),
) -> GradientCheck:
    """Finite-difference, ``dH/du`` and ``Z`` forms of ``dJ(u_hat)[direction]``.

    All three share the problem's noise paths. Gaps are relative to the
    larger magnitude of each pair, using the smallest ``theta``.
    """
    spec, grid = problem.spec, problem.grid
    M, N, dt = problem.M, grid.size, problem.dt
    v = direction if isinstance(direction, ControlField) else ControlField(u_hat.mode, direction, spec.u_min, spec.u_max)
    base_fw = problem.forward(u_hat)
    base_J = eval_J(spec, u_hat, base_fw)
    fds = []
    for th in thetas:
        shifted = u_hat.shifted(th, v)
        if not shifted.in_U():
            raise ValueError(f"u_hat + {th} * direction leaves U")
        Jt = eval_J(spec, shifted, problem.forward(shifted))
        fds.append(float((Jt.mean - base_J.mean) / th))

    kept = base_fw.kept
    vv = v.nodal(M, N)
    adj = problem.adjoint(base_fw)
    hu = _hu(spec, adj, base_fw, base_fw.u)
    per_path = np.sum(grid.integrate(hu * vv), axis=1) * dt
    adjoint_form = float(np.mean(per_path[kept] if per_path.size > 1 else per_path))

    Z = solve_derivative_Z(grid, problem.op, spec, v, base_fw, problem.threads)
    Zb = apply_G(Z, problem.kernel)
    Y, Yb, x = base_fw.Y, base_fw.ybar(), grid.points
    uu = base_fw.u
    zf = np.zeros(base_fw.P)
    for m in range(M):
        t = m * dt
        y, yb, um = Y[:, m], Yb[:, m], uu[:, m]
        dens = (
            spec.df_dy(t, x, y, yb, um) * Z[:, m]
            + spec.df_dyb(t, x, y, yb, um) * Zb[:, m]
            + spec.df_du(t, x, y, yb, um) * vv[:, m]
        )
        zf += dt * grid.integrate(dens)
    yT, ybT = Y[:, M], Yb[:, M]
    zf += grid.integrate(spec.dg_dy(x, yT, ybT) * Z[:, M] + spec.dg_dyb(x, yT, ybT) * Zb[:, M])
    z_form = float(np.mean(zf[kept]))

    fd = fds[int(np.argmin(thetas))]
    gaps = {
        "fd_vs_adjoint": _rel_gap(fd, adjoint_form),
        "fd_vs_z": _rel_gap(fd, z_form),
        "adjoint_vs_z": _rel_gap(adjoint_form, z_form),
    }
    norm = float(np.mean(np.sum(grid.integrate(np.abs(vv)), axis=1)) * dt)
    return GradientCheck(list(map(float, thetas)), fds, adjoint_form, z_form, gaps, norm)


@dataclass
class OracleResult:
    values: np.ndarray
    J: np.ndarray
    best_value: float
    best_J: float
    best_index: int

    @property
    def unimodal(self) -> bool:
        """No interior local minimum along the value grid."""
        d = np.sign(np.diff(self.J))
        d = d[d != 0]
        return bool(np.all(np.diff(d) <= 0)) if d.size > 1 else True


def brute_force_constant_oracle(problem: HarvestProblem, values) -> OracleResult:
    """``J`` of every constant control on ``values`` via full forward solves.

    Values whose every path ends outside S score ``-inf``.
    """
    spec = problem.spec
    values = np.atleast_1d(np.asarray(values, dtype=float))
    if np.any(values < spec.u_min) or np.any(values > spec.u_max):
        raise ValueError("oracle value grid must lie inside U")
    Js = np.empty(values.size)
    for i, val in enumerate(values):
        u = ControlField.constant(val, spec)
        fw = problem.forward(u)
        Js[i] = eval_J(spec, u, fw).mean if fw.kept.any() else -np.inf
    k = int(np.argmax(Js))
    return OracleResult(values, Js, float(values[k]), float(Js[k]), k)
