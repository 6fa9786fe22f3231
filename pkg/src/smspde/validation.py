"""Invariant suite behind the ``validate`` command.

Each check takes the configured setup and returns ``(passed, detail)``.
Checks are cheap versions of the test-suite properties, run on the user's
grid, kernel and model.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .backward import HamiltonianDriver, solve_bspde_deterministic, solve_bspde_regression
from .config import Setup
from .control import ControlField, HarvestProblem, directional_derivative_check
from .forward import solve_forward
from .model import Affine, HamiltonianInputs, check_concavity, dH_du, dH_dy, dH_dybar, hamiltonian
from .noise import LevyModel, compensated_increments, sample_paths
from .operators import check_coercivity, random_interior_fields, transpose_operator
from .spacemean import apply_G, apply_G_dual, coverage_vD


def _rng(seed=12345):
    return np.random.default_rng(seed)


def check_norms(s: Setup):
    f = _rng().standard_normal((20, s.grid.size))
    l2, h1 = s.grid.l2_norm(f), s.grid.sobolev_norm(f)
    return bool(np.all(l2 <= h1)), f"max l2/sobolev = {float((l2 / h1).max()):.6f}"


def check_contraction(s: Setup):
    f = _rng().standard_normal((50, s.grid.size))
    ratio = s.grid.l2_norm(apply_G(f, s.kernel)) / s.grid.l2_norm(f)
    return bool(ratio.max() <= 1.02), f"max |Gf|/|f| = {float(ratio.max()):.6f}"


def check_adjointness(s: Setup):
    rng = _rng()
    f, psi = rng.standard_normal((2, 20, s.grid.size))
    lhs = s.grid.inner(apply_G(f, s.kernel), psi)
    rhs = s.grid.inner(f, apply_G_dual(psi, s.kernel))
    gap = np.abs(lhs - rhs) / (s.grid.l2_norm(f) * s.grid.l2_norm(psi))
    return bool(gap.max() <= 1e-12), f"max relative gap = {float(gap.max()):.3e}"


def check_coverage(s: Setup):
    v = coverage_vD(s.grid, s.kernel.theta)
    return bool(v.min() >= 0 and v.max() <= 1), f"v_D in [{v.min():.4f}, {v.max():.4f}]"


def check_operator(s: Setup):
    rep = check_coercivity(s.op, lam=1.0, alpha_coer=0.0, trials=10)
    rng = _rng()
    phi, psi = random_interior_fields(s.grid, 2, rng, margin=1)
    At = transpose_operator(s.op)
    lhs = s.grid.inner(s.op.apply(phi), psi)
    rhs = s.grid.inner(phi, At.apply(psi))
    scale = s.grid.l2_norm(s.op.apply(phi)) * s.grid.l2_norm(psi) + 1e-300
    gap = abs(lhs - rhs) / scale
    return bool(rep.passed and gap <= 1e-12), f"coercivity min ratio {rep.min_ratio:.4f}, transpose gap {gap:.1e}"


def check_noise(s: Setup):
    lev = s.spec.levy
    a = sample_paths(20, 1.0, lev, 50, 7)
    b = sample_paths(20, 1.0, lev, 80, 7)
    same = all(x.same_as(y) for x, y in zip(a, b))
    n = compensated_increments(sample_paths(20, 1.0, lev, 4000, 8), lev).sum(axis=1)
    se = n.std(ddof=1) / np.sqrt(n.size) if lev.intensity > 0 else 0.0
    ok = same and abs(n.mean()) <= 3 * se + 1e-15
    return bool(ok), f"prefix-stable={same}, compensated mean {n.mean():.3e} (3se {3 * se:.3e})"


def check_derivatives(s: Setup):
    rng = _rng()
    spec = s.spec
    n = 100
    lo = max(spec.u_min, 0.1)
    hi = min(spec.u_max, lo + 5.0)
    y, yb = rng.uniform(0.5, 2.0, (2, n))
    u = rng.uniform(lo + 1e-3, hi - 1e-3, n)
    p, q, cr = rng.uniform(-1, 1, (3, n))
    x = np.tile(s.grid.points[s.grid.size // 2], (n, 1))
    eps = 1e-5
    worst = 0.0
    for name, fn in (("u", dH_du), ("y", dH_dy), ("yb", dH_dybar)):
        def H(dv):
            args = {"y": y, "yb": yb, "u": u}
            args[name] = args[name] + dv
            return hamiltonian(spec, 0.0, x, HamiltonianInputs(args["y"], args["yb"], args["u"], p, q, cr))

        fd = (H(eps) - H(-eps)) / (2 * eps)
        an = fn(spec, 0.0, x, HamiltonianInputs(y, yb, u, p, q, cr))
        worst = max(worst, float(np.max(np.abs(fd - an) / np.maximum(1.0, np.abs(an)))))
    return worst <= 1e-6, f"max FD mismatch {worst:.2e}"


def check_concave(s: Setup):
    rep = check_concavity(s.spec, 200, 0)
    ok = rep.passed or not s.spec.concave
    return ok, f"worst violation {rep.worst_violation:.2e} (preset concave: {s.spec.concave})"


def _small_problem(s: Setup) -> HarvestProblem:
    pr = s.problem
    return replace(pr, M=min(pr.M, 40), P=min(pr.P, 200))


def check_forward(s: Setup):
    pr = _small_problem(s)
    fw = pr.forward(ControlField.constant(float(np.clip(1.0, s.spec.u_min, s.spec.u_max)), s.spec))
    b = s.grid.boundary_mask
    ok_init = np.array_equal(fw.Y[:, 0, ~b], np.broadcast_to(s.xi[~b], fw.Y[:, 0, ~b].shape))
    ok_bnd = np.array_equal(fw.Y[:, 1:, b], np.broadcast_to(s.eta[b], fw.Y[:, 1:, b].shape))
    return bool(ok_init and ok_bnd), f"initial exact={ok_init}, boundary exact={ok_bnd}, rejected={int((~fw.kept).sum())}"


def check_backward(s: Setup):
    pr = _small_problem(s)
    if hasattr(s.spec, "beta"):
        spec0 = replace(s.spec, beta=0.0, levy=LevyModel())
    else:
        spec0 = replace(s.spec, vol=Affine(), levy=LevyModel())
    grid, k = s.grid, s.kernel
    u = ControlField.constant(float(np.clip(1.0, spec0.u_min, spec0.u_max)), spec0)
    paths = sample_paths(pr.M, pr.T, LevyModel(), 3, 1)
    fw = solve_forward(grid, s.op, spec0, u, s.xi, s.eta, paths, k, reject=False)
    if not fw.kept.all() or not np.all(spec0.in_S(fw.Y[:, -1])):
        return True, "skipped: terminal state outside S for u = 1"
    term = spec0.dg_dy(grid.points, fw.Y[:, -1], apply_G(fw.Y[:, -1], k))
    opa = transpose_operator(s.op)
    reg = solve_bspde_regression(grid, opa, HamiltonianDriver(spec0, k, fw), fw, term)
    fw1 = solve_forward(grid, s.op, spec0, u, s.xi, s.eta, paths[:1], k, reject=False)
    det = solve_bspde_deterministic(grid, opa, HamiltonianDriver(spec0, k, fw1), term[0], pr.M, pr.T)
    gap = float(np.abs(reg.p - det.p).max())
    term_ok = np.array_equal(det.p[0, -1], term[0])
    bnd_ok = not np.any(det.p[0, :-1, grid.boundary_mask])
    return bool(gap <= 1e-8 and term_ok and bnd_ok), f"zero-noise regression gap {gap:.2e}, terminal={term_ok}, boundary={bnd_ok}"


def check_gradient(s: Setup):
    pr = _small_problem(s)
    spec = s.spec
    if pr.stochastic or spec.stationary_control(np.ones(1)) is None:
        return True, "skipped: needs a zero-noise preset"
    u = ControlField.initial("pointwise", 1.0, spec, pr.M, s.grid.size)
    t = (np.arange(pr.M) + 0.5) / pr.M
    shape = np.ones(s.grid.size)
    shape[s.grid.boundary_mask] = 0.0
    direction = (1.0 + t)[:, None] * shape[None, :]
    try:
        rep = directional_derivative_check(pr, u, direction, (1e-3,))
    except ValueError as exc:
        return True, f"skipped: {exc}"
    worst = max(rep.gaps.values())
    return worst <= 0.05, f"max pairwise gap {worst:.2e}"


CHECKS = [
    ("grid: l2 <= sobolev", check_norms),
    ("spacemean: contraction", check_contraction),
    ("spacemean: discrete adjointness", check_adjointness),
    ("spacemean: 0 <= v_D <= 1", check_coverage),
    ("operators: coercivity and transpose", check_operator),
    ("noise: reproducibility and compensated mean", check_noise),
    ("model: derivatives match finite differences", check_derivatives),
    ("model: concavity of presets", check_concave),
    ("forward: initial and boundary data exact", check_forward),
    ("backward: zero-noise consistency", check_backward),
    ("control: directional derivative forms agree", check_gradient),
]


def run_suite(s: Setup) -> list[dict]:
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn(s)
        except Exception as exc:  # a crash is a failed invariant, reported as such
            ok, detail = False, f"error: {type(exc).__name__}: {exc}"
        out.append({"invariant": name, "passed": bool(ok), "detail": detail})
    return out
