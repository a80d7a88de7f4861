"""Command-line entry point: ``fluotomo <subcommand> --config run.ini``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import warnings

import numpy as np

from . import config as cfgmod
from .adjoint import ReducedFunctional, kkt_check, misfit_gradient, tangent_linear
from .config import ConfigError
from .functionals import MeasurementData
from .grid import read_field, write_field, write_vtk
from .inverse import p_continuation
from .phantom import build_sources, make_phantom, refine, synth_data
from .robin import SolverError, forward

log = logging.getLogger("fluotomo")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_NO_STAGE, EXIT_GRAD, EXIT_KKT = 0, 1, 2, 3, 4, 5


# -- trace files -------------------------------------------------------------------


def write_trace(path: str, gamma, values: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write(f"TRACE {len(gamma.nodes)} {gamma.selector or 'all'}\n")
        for k, (a, b) in zip(gamma.nodes, values):
            fh.write(f"{int(k)} {float(a)!r} {float(b)!r}\n")


def read_trace(path: str):
    """Returns ``(selector, nodes, values)``."""
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 3 or head[0] != "TRACE":
            raise ConfigError(f"{path}: not a trace file")
        rows = np.loadtxt(fh, ndmin=2)
    if rows.shape != (int(head[1]), 3):
        raise ConfigError(f"{path}: expected {head[1]} rows of 'node re im'")
    return head[2], rows[:, 0].astype(np.int64), rows[:, 1:]


# -- problem setup -------------------------------------------------------------------


class Problem:
    """Everything a subcommand needs, built from one configuration."""

    def __init__(self, cfg, threads: int = 1):
        self.cfg = cfg
        self.threads = threads
        self.tol = cfg.get("solver", "tol")
        self.grid = cfgmod.grid_from(cfg)
        try:
            self.coeffs = cfgmod.coefficients_from(cfg, self.grid)
            self.phantom_spec = cfgmod.phantom_spec_from(cfg)
            self.source_specs = cfgmod.source_specs_from(cfg)
            self.xi_true = make_phantom(self.grid, self.phantom_spec, self.coeffs.M)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self._data = None

    def data(self):
        """Measurement data and source objects (synthetic or read from files)."""
        if self._data is not None:
            return self._data
        cfg = self.cfg
        if cfg.get("data", "source") == "files":
            paths = cfg.get("data", "traces") or ()
            sources, gammas = build_sources(self.grid, self.source_specs)
            if len(paths) != len(sources):
                raise ConfigError("data.traces: need one trace file per source")
            traces = []
            for path, g in zip(paths, gammas):
                _, nodes, vals = read_trace(cfg.path(path))
                if not np.array_equal(nodes, g.nodes):
                    raise ConfigError(f"data.traces: {path} does not match its measurement set")
                traces.append(vals)
            self._data = (MeasurementData(gammas, traces, cfg.get("noise", "delta")), sources, None)
            return self._data
        fine = None
        if cfg.get("flags", "fine_data"):
            fgrid = refine(self.grid)
            fcoeffs = cfgmod.coefficients_from(cfg, fgrid)
            fine = (fcoeffs, make_phantom(fgrid, self.phantom_spec, self.coeffs.M))
        sd = synth_data(self.coeffs, self.xi_true, self.source_specs, cfg.get("noise", "delta"),
                        cfg.get("noise", "seed"), fine=fine, tol=self.tol, threads=self.threads)
        self._data = (sd.data, sd.sources, sd)
        return self._data

    def functional(self, p: float) -> ReducedFunctional:
        data, sources, _ = self.data()
        return ReducedFunctional(self.coeffs, sources, data, cfgmod.energy_params(self.cfg, p),
                                 self.tol, self.threads)


def _out_dir(args, cfg) -> str:
    out = args.out if args.out else cfg.path(cfg.get("output", "dir"))
    os.makedirs(out, exist_ok=True)
    return out


def _p_label(p: float) -> str:
    return f"{p:g}"


# -- subcommands ---------------------------------------------------------------------


def cmd_phantom(args, cfg) -> int:
    prob = Problem(cfg, args.threads)
    out = _out_dir(args, cfg)
    write_field(os.path.join(out, "xi_true.field"), "scalar", prob.grid, prob.xi_true)
    if args.vtk:
        write_vtk(os.path.join(out, "xi_true.vtk"), prob.grid, {"xi": prob.xi_true})
    print(f"phantom: nodes={prob.grid.n_nodes} min={prob.xi_true.min():.6g} "
          f"max={prob.xi_true.max():.6g}")
    return EXIT_OK


def cmd_forward(args, cfg) -> int:
    prob = Problem(cfg, args.threads)
    out = _out_dir(args, cfg)
    sources, gammas = build_sources(prob.grid, prob.source_specs)
    st = forward(prob.coeffs, prob.xi_true, sources, gammas, prob.tol, prob.threads)
    print("source field      iters  rel_residual  method")
    for i, (u, v, g, (ru, rv)) in enumerate(zip(st.u, st.v, st.gammas, st.reports)):
        write_field(os.path.join(out, f"u_{i}.field"), "vec2", prob.grid, u)
        write_field(os.path.join(out, f"v_{i}.field"), "vec2", prob.grid, v)
        write_trace(os.path.join(out, f"trace_{i}.trace"), g, st.traces[i])
        for name, r in (("u", ru), ("v", rv)):
            print(f"{i:6d} {name:10s} {r.iterations:6d}  {r.relative_residual:.3e}     {r.method}")
    return EXIT_OK


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def cmd_invert(args, cfg) -> int:
    prob = Problem(cfg, args.threads)
    out = _out_dir(args, cfg)
    schedule = list(cfg.get("energy", "schedule"))
    data, sources, synth = prob.data()
    F = prob.functional(schedule[0])
    xi0 = cfgmod.initial_xi(cfg, prob.grid)
    if xi0.shape != (prob.grid.n_nodes,):
        raise ConfigError("optimizer.xi0: field does not match the grid")
    opt = cfgmod.optimizer_config(cfg)
    if synth is not None:
        write_field(os.path.join(out, "xi_true.field"), "scalar", prob.grid, prob.xi_true)
    for i, (g, t) in enumerate(zip(data.gammas, data.traces)):
        write_trace(os.path.join(out, f"data_{i}.trace"), g, t)

    trace_fh = open(os.path.join(out, "trace.jsonl"), "w")
    csv_fh = open(os.path.join(out, "energy.csv"), "w")
    N = data.N
    csv_fh.write(",".join(["iter", "p", "E_p", "E_inf"] + [f"misfit_{i}" for i in range(N)]
                          + ["tikhonov_term"]) + "\n")

    def on_iter(rec):
        trace_fh.write(json.dumps(rec, default=_json_default) + "\n")
        csv_fh.write(",".join(repr(float(v)) if not isinstance(v, int) else str(v) for v in
                              [rec["iter"], rec["p"], rec["E_p"], rec["E_inf"], *rec["misfit"],
                               rec["tikhonov"]]) + "\n")

    def on_stage(res):
        if res.succeeded:
            name = f"xi_p{_p_label(res.p)}_final.field"
            write_field(os.path.join(out, name), "scalar", prob.grid, res.xi)
            res.snapshot = name
        trace_fh.write(json.dumps(res.summary(), default=_json_default) + "\n")
        trace_fh.flush()
        csv_fh.flush()

    try:
        trace = p_continuation(F, schedule, xi0, opt, diagnostics=True,
                               multistart=cfg.get("flags", "multistart"),
                               seed=cfg.get("noise", "seed"), callback=on_iter, stage_callback=on_stage)
    finally:
        trace_fh.close()
        csv_fh.close()

    final = trace.final
    w = prob.grid.node_weights
    print(f"{'p':>6s} {'iters':>6s} {'status':>12s} {'E_p':>14s} {'E_inf':>14s} "
          f"{'TV(nu_p)':>10s} {'C_p':>10s}")
    for s in trace.stages:
        print(f"{_p_label(s.p):>6s} {s.iterations:6d} {s.status:>12s} {s.E_p:14.8e} "
              f"{s.E_inf:14.8e} {s.total_variation:10.6f} {s.C_p:10.4e}")
    if final is None:
        print("no stage succeeded", file=sys.stderr)
        return EXIT_NO_STAGE
    write_field(os.path.join(out, "xi_final.field"), "scalar", prob.grid, final.xi)
    if synth is not None and np.any(prob.xi_true):
        err = np.sqrt(w @ (final.xi - prob.xi_true) ** 2 / (w @ prob.xi_true**2))
        print(f"relative L2 error of xi: {err:.6f}")
    return EXIT_OK


def gradient_check(prob: Problem, p: float, eps_list, n_nodes: int, n_dirs: int, seed: int,
                   corrupt: bool = False) -> dict:
    """Adjoint gradient against central differences and the tangent-linear pairing."""
    F = prob.functional(p)
    M = prob.coeffs.M
    rng = np.random.default_rng(seed)
    grid = prob.grid
    xi = rng.uniform(0.25 * M, 0.75 * M, grid.n_nodes)
    _, g = F.value_and_grad(xi)
    g = -g if corrupt else g.copy()
    ev = F.evaluate(xi)
    nu, adj = ev.nu, ev.adjoints
    nodes = rng.choice(grid.n_nodes, size=min(n_nodes, grid.n_nodes), replace=False)
    dirs = [rng.standard_normal(grid.n_nodes) for _ in range(n_dirs)]
    probes = [np.eye(1, grid.n_nodes, k).ravel() for k in nodes] + [d / np.linalg.norm(d) for d in dirs]

    sweep = {}
    for eps in eps_list:
        worst = 0.0
        for e in probes:
            fd = (F.value(xi + eps * e) - F.value(xi - eps * e)) / (2 * eps)
            ad = float(g @ e)
            worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad), 1e-300))
        sweep[eps] = worst

    F.value_and_grad(xi)
    st = F.evaluate(xi).state
    mg = misfit_gradient(prob.coeffs, xi, st, adj)
    tl_worst = 0.0
    for d in dirs:
        _, wdot = tangent_linear(prob.coeffs, xi, d, st, prob.tol)
        tl = nu.pair([wd[gm.nodes] for wd, gm in zip(wdot, nu.gammas)])
        ad = float(mg @ d)
        tl_worst = max(tl_worst, abs(tl - ad) / max(abs(tl), abs(ad), 1e-300))
    return {"p": p, "sweep": sweep, "fd_discrepancy": min(sweep.values()),
            "tangent_discrepancy": tl_worst}


def cmd_grad_check(args, cfg) -> int:
    prob = Problem(cfg, args.threads)
    p = args.p or cfg.get("gradcheck", "p") or cfg.get("energy", "schedule")[0]
    eps_list = args.eps or cfg.get("gradcheck", "eps")
    res = gradient_check(prob, p, eps_list, cfg.get("gradcheck", "nodes"),
                         cfg.get("gradcheck", "directions"), cfg.get("gradcheck", "seed"),
                         corrupt=args.corrupt_gradient)
    tol = cfg.get("gradcheck", "tolerance")
    print(f"{'eps':>10s} {'max_rel_discrepancy':>20s}")
    for eps, d in res["sweep"].items():
        print(f"{eps:10.1e} {d:20.3e}")
    print(f"tangent-vs-adjoint max_rel_discrepancy {res['tangent_discrepancy']:.3e}")
    ok = res["fd_discrepancy"] <= tol
    print(f"grad-check p={_p_label(p)}: {'PASS' if ok else 'FAIL'} "
          f"({res['fd_discrepancy']:.3e} vs tolerance {tol:.1e})")
    return EXIT_OK if ok else EXIT_GRAD


_SNAP_RE = re.compile(r"xi_p([0-9.eE+-]+)_final\.field$")


def cmd_kkt_check(args, cfg) -> int:
    prob = Problem(cfg, args.threads)
    _, fgrid, xi = read_field(args.xi)
    if fgrid != prob.grid:
        raise ConfigError(f"{args.xi}: snapshot grid does not match [grid]")
    p = args.p
    if p is None:
        m = _SNAP_RE.search(os.path.basename(args.xi))
        p = float(m.group(1)) if m else cfg.get("energy", "schedule")[-1]
    xi = np.clip(np.asarray(xi, dtype=float).reshape(-1), 0.0, prob.coeffs.M)
    F = prob.functional(p)
    conv = cfg.get("flags", "gradient_convention")
    rep = kkt_check(F, xi, seed=cfg.get("noise", "seed"), convention=conv)
    g_tol = cfg.get("optimizer", "g_tol")
    print(f"p={_p_label(p)} convention={conv}")
    print(f"eq_5_21_residual      {rep.eq_5_21_residual:.3e}  (limit {10 * prob.tol:.1e})")
    print(f"eq_5_22_residual      {rep.eq_5_22_residual:.3e}  (limit {10 * prob.tol:.1e})")
    print(f"ineq_5_20_min_slack   {rep.ineq_5_20_min_slack:.6e}")
    print(f"ineq_5_20_scaled      {rep.ineq_5_20_scaled_slack:.6e}  (limit {-g_tol:.1e})")
    print(f"C_p                   {rep.C_p:.6e}")
    print(f"total_variation       {rep.total_variation:.6f}")
    print("sample slack")
    for i, s in enumerate(rep.slacks):
        print(f"{i:6d} {s: .6e}")
    ok = rep.passed(prob.tol, g_tol)
    print(f"kkt-check: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_KKT


# -- argument parsing ----------------------------------------------------------------


def _add_globals(parser, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="run configuration (INI)")
    parser.add_argument("--out", default=d(None), help="output directory (overrides output.dir)")
    parser.add_argument("--threads", type=int, default=d(1), help="worker threads for per-source solves")
    parser.add_argument("--deterministic", action="store_true", default=d(False),
                        help="single-threaded, reproducible run")
    parser.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluotomo", description=__doc__)
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _add_globals(common, suppress=True)

    sp = sub.add_parser("phantom", parents=[common], help="write the ground-truth phantom")
    sp.add_argument("--vtk", action="store_true", help="also write a legacy VTK file")
    sp.set_defaults(func=cmd_phantom)
    sp = sub.add_parser("forward", parents=[common], help="solve the direct problem")
    sp.set_defaults(func=cmd_forward)
    sp = sub.add_parser("invert", parents=[common], help="run the p-continuation reconstruction")
    sp.set_defaults(func=cmd_invert)
    sp = sub.add_parser("grad-check", parents=[common], help="adjoint gradient vs finite differences")
    sp.add_argument("--p", type=float, default=None)
    sp.add_argument("--eps", type=float, nargs="+", default=None, help="finite-difference steps")
    sp.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_grad_check)
    sp = sub.add_parser("kkt-check", parents=[common], help="first-order diagnostics at a snapshot")
    sp.add_argument("--xi", required=True, help="snapshot field file")
    sp.add_argument("--p", type=float, default=None)
    sp.set_defaults(func=cmd_kkt_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 1), stream=sys.stderr,
                        format="%(name)s: %(message)s")
    if args.deterministic:
        args.threads = 1
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if not args.config:
        print("config error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = cfgmod.load(args.config)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for msg in cfgmod.parameter_warnings(cfg):
                print(f"warning: {msg}", file=sys.stderr)
            return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
