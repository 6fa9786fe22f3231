"""Command line entry point.

    smspde <command> [--config run.yaml] [--out DIR]

Commands: validate, simulate, adjoint, picard, optimize, gradcheck, oracle.
Every run writes ``config.yaml`` (canonical echo), its outputs, and
``manifest.json`` (version, seed, command, SHA-256 of every file).

Exit codes: 0 success, 1 bad configuration, 2 numerical failure (details in
``diagnostic.json``), 3 validation failures.

CSV schemas:
    forward.csv  path,t,x[,y],Y
    adjoint.csv  path,t,x[,y],p,q,c_r
    picard.csv   n,dp,dq,dr,ratio
    control.csv  t[,x[,y]],u
    oracle.csv   value,J
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .backward import LinearDriver, picard_solve
from .config import ConfigError, RunConfig, build_setup, load_config, output_dir
from .control import ControlField, brute_force_constant_oracle, directional_derivative_check, optimize
from .forward import NumericalError
from .spacemean import apply_G, apply_G_dual

log = logging.getLogger("smspde")

COMMANDS = ("validate", "simulate", "adjoint", "picard", "optimize", "gradcheck", "oracle")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VALIDATION = 0, 1, 2, 3


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


class Writer:
    """Output directory with a record of every file written."""

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    def text(self, name: str, content: str):
        with open(self.path(name), "w", newline="") as fh:
            fh.write(content)
        self.files.append(name)

    def json(self, name: str, obj):
        self.text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def csv(self, name: str, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([fmt(v) for v in r])
        self.files.append(name)

    def manifest(self, command: str, cfg: RunConfig):
        digests = {}
        for name in sorted(set(self.files)):
            with open(self.path(name), "rb") as fh:
                digests[name] = hashlib.sha256(fh.read()).hexdigest()
        self.json(
            "manifest.json",
            {
                "command": command,
                "version": __version__,
                "seed": cfg.noise.seed,
                "paths": cfg.noise.paths,
                "numpy": np.__version__,
                "files": digests,
            },
        )


def _coord_header(dim: int):
    return ["x"] if dim == 1 else ["x", "y"]


def _field_rows(grid, times, arrays, max_paths):
    """Rows ``(path, t, x..., values...)`` from arrays of shape ``(P, M+1, N)``."""
    pts = grid.points
    P = min(arrays[0].shape[0], max_paths)
    for i in range(P):
        for m, t in enumerate(times):
            for n in range(grid.size):
                yield (i, t, *pts[n], *(a[i, m, n] for a in arrays))


# commands ----------------------------------------------------------------


def cmd_validate(cfg, setup, out: Writer):
    from .validation import run_suite

    results = run_suite(setup)
    out.json("validation.json", {"invariants": results, "passed": all(r["passed"] for r in results)})
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['invariant']}: {r['detail']}")
    failed = [r["invariant"] for r in results if not r["passed"]]
    if failed:
        print("failed invariants: " + "; ".join(failed), file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def _initial_control(cfg, setup):
    pr = setup.problem
    return ControlField.initial(cfg.solver.control_mode, cfg.solver.u0, setup.spec, pr.M, setup.grid.size)


def cmd_simulate(cfg, setup, out: Writer):
    fw = setup.problem.forward(_initial_control(cfg, setup))
    header = ["path", "t", *_coord_header(setup.grid.dim), "Y"]
    out.csv("forward.csv", header, _field_rows(setup.grid, fw.times, [fw.Y], cfg.output.max_paths))
    out.json("forward_summary.json", {"paths": fw.P, "rejected": int((~fw.kept).sum()), "M": fw.M})
    return EXIT_OK


def cmd_adjoint(cfg, setup, out: Writer):
    pr = setup.problem
    fw = pr.forward(_initial_control(cfg, setup))
    adj = pr.adjoint(fw)
    header = ["path", "t", *_coord_header(setup.grid.dim), "p", "q", "c_r"]
    rows = _field_rows(setup.grid, adj.times, [adj.p, adj.q, adj.cr], cfg.output.max_paths)
    out.csv("adjoint.csv", header, rows)
    out.json("adjoint_summary.json", {"paths": fw.P, "regression_fallbacks": adj.deficient})
    return EXIT_OK


def cmd_picard(cfg, setup, out: Writer):
    pr, pc, grid = setup.problem, cfg.picard, setup.grid
    driver = LinearDriver(
        setup.kernel, pc.a_p, pc.a_pbar, pc.a_q, pc.a_qbar, pc.a_cr, pc.a_crbar, pc.source
    )
    fw = pr.forward(_initial_control(cfg, setup))
    yT = fw.Y[:, -1]
    # terminal slope of the configured model drives a genuinely random terminal value
    safe = np.where(fw.kept[:, None], yT, 1.0)
    terminal = setup.spec.dg_dy(grid.points, safe, apply_G(safe, setup.kernel)) + apply_G_dual(
        setup.spec.dg_dyb(grid.points, safe, apply_G(safe, setup.kernel)), setup.kernel
    )
    kw = dict(n_max=cfg.solver.picard_max, tol=cfg.solver.picard_tol, initial=pc.initial)
    if pr.stochastic:
        _, trace = picard_solve(grid, pr.op_adjoint, driver, terminal, forward=fw, **kw)
    else:
        _, trace = picard_solve(grid, pr.op_adjoint, driver, terminal[0], M=pr.M, T=pr.T, **kw)
    out.csv("picard.csv", ["n", "dp", "dq", "dr", "ratio"], trace.rows())
    out.json(
        "picard_summary.json",
        {
            "converged": trace.converged,
            "iterations": trace.iterations,
            "step": trace.step,
            "geometric_slope": trace.geometric_slope(),
            "inner_iterations": trace.inner,
        },
    )
    if not trace.converged:
        print(f"Picard iteration did not converge in {trace.iterations} iterations", file=sys.stderr)
    return EXIT_OK


def _control_rows(u: ControlField, grid, T):
    return u.table(grid, T)


def _control_header(u: ControlField, dim):
    if u.mode == "pointwise":
        return ["t", *_coord_header(dim), "u"]
    return ["t", "u"]


def _run_optimizer(cfg, setup):
    s = cfg.solver
    return optimize(
        setup.problem, s.control_mode, s.u0, s.omega, s.tol, s.max_iter, relative=s.relative_tol
    )


def cmd_optimize(cfg, setup, out: Writer):
    res = _run_optimizer(cfg, setup)
    u = res.control
    out.csv("control.csv", _control_header(u, setup.grid.dim), _control_rows(u, setup.grid, setup.problem.T))
    out.json("report.json", res.report.to_json())
    print(
        f"converged={res.report.converged} iterations={res.report.iterations} "
        f"residual={res.report.residual:.3e} J={res.report.J_trace[-1]:.10g}"
    )
    return EXIT_OK


def cmd_gradcheck(cfg, setup, out: Writer):
    pr, grid = setup.problem, setup.grid
    if cfg.gradcheck.at == "optimum":
        base = _run_optimizer(cfg, setup).control
    else:
        base = _initial_control(cfg, setup)
    # direction vanishing on the boundary, growing in time
    shape = np.ones(grid.size)
    shape[grid.boundary_mask] = 0.0
    t = np.arange(pr.M) / pr.M
    if base.mode == "pointwise":
        direction = (1.0 + t)[:, None] * shape[None, :]
    elif base.mode == "xfree":
        direction = 1.0 + t
    else:
        direction = 1.0
    rep = directional_derivative_check(pr, base, direction, tuple(cfg.gradcheck.thetas))
    out.json("gradcheck.json", rep.to_json())
    print(json.dumps(rep.gaps, sort_keys=True))
    return EXIT_OK


def cmd_oracle(cfg, setup, out: Writer):
    oc = cfg.oracle
    values = np.linspace(oc.low, oc.high, oc.count)
    res = brute_force_constant_oracle(setup.problem, values)
    out.csv("oracle.csv", ["value", "J"], zip(res.values, res.J))
    out.json(
        "oracle.json",
        {"best_value": res.best_value, "best_J": res.best_J, "best_index": res.best_index, "unimodal": res.unimodal},
    )
    print(f"best constant control {res.best_value:.10g} with J = {res.best_J:.10g}")
    return EXIT_OK


HANDLERS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "adjoint": cmd_adjoint,
    "picard": cmd_picard,
    "optimize": cmd_optimize,
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smspde", description=__doc__.split("\n")[0] or None)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("-c", "--config", help="YAML run configuration (defaults if omitted)")
        sp.add_argument("-o", "--out", help="output directory (overrides config and SMSPDE_OUTPUT_DIR)")
        sp.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("defaults", help="print the default configuration")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "defaults":
        sys.stdout.write(RunConfig.from_dict({}).canonical_yaml())
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        setup = build_setup(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Writer(output_dir(cfg, args.out))
    out.text("config.yaml", cfg.canonical_yaml())
    try:
        code = HANDLERS[args.command](cfg, setup, out)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        info = getattr(exc, "info", {})
        out.json("diagnostic.json", {"command": args.command, "error": str(exc), "info": _jsonable(info)})
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # domain errors raised mid-run (e.g. every path leaving S)
        out.json("diagnostic.json", {"command": args.command, "error": str(exc), "info": {}})
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    out.manifest(args.command, cfg)
    return code


def _jsonable(obj):
    try:
        json.dumps(obj)
        return obj
    except TypeError:
        return repr(obj)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
