"""Box-constrained minimisation of the reduced L^p energy and p-continuation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .adjoint import ReducedFunctional, kkt_check
from .functionals import EnergyParams, nu_measure, total_variation
from .robin import SolverError

log = logging.getLogger("fluotomo.inverse")

DEFAULT_SCHEDULE = (4.0, 8.0, 16.0, 32.0, 64.0)
DEFAULT_ALPHA = 1e-3


def default_m(dim: int) -> float:
    return float(max(dim, 4) + 1)


def project_box(xi, M: float) -> np.ndarray:
    if not M > 0:
        raise ValueError("M must be positive")
    return np.clip(np.asarray(xi, dtype=float), 0.0, M)


@dataclass(frozen=True)
class OptimizerConfig:
    g_tol: float = 1e-4
    max_iters: int = 100
    c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30
    step0: float = 1.0
    step_min: float = 1e-10
    step_max: float = 1e10
    pg_step: float = 1e-6
    method: str = "lbfgs"
    memory: int = 10

    def __post_init__(self):
        if self.method not in ("lbfgs", "spg"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if not self.g_tol > 0 or not self.step0 > 0 or not self.pg_step > 0:
            raise ValueError("g_tol, step0 and pg_step must be positive")
        if self.max_iters < 0 or self.max_backtracks < 1:
            raise ValueError("max_iters must be >= 0 and max_backtracks >= 1")
        if not 0 < self.c1 < 1 or not 0 < self.backtrack < 1:
            raise ValueError("armijo parameters must lie in (0, 1)")
        if not 0 < self.step_min < self.step_max:
            raise ValueError("need 0 < step_min < step_max")


@dataclass
class StageResult:
    p: float
    xi: np.ndarray
    iterations: int
    E_p: float
    E_inf: float
    misfit: list
    misfit_inf: list
    tikhonov: float
    pg_norm: float
    status: str             # converged | max_iters | line_search | solver_failure
    records: list = field(default_factory=list)
    kkt: dict | None = None
    total_variation: float = float("nan")
    C_p: float = float("nan")
    snapshot: str | None = None
    multistart: dict | None = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def succeeded(self) -> bool:
        return self.status != "solver_failure"

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("xi", "records")}
        d["record"] = "stage"
        return d


@dataclass
class ReconstructionTrace:
    schedule: list
    stages: list = field(default_factory=list)

    @property
    def final(self) -> StageResult | None:
        ok = [s for s in self.stages if s.succeeded]
        return ok[-1] if ok else None

    def records(self) -> list:
        out = []
        for s in self.stages:
            out.extend(s.records)
            out.append(s.summary())
        return out


def _wnorm(w, a) -> float:
    return float(np.sqrt(np.dot(w, a * a)))


def projected_gradient_norm(xi, G, w, M: float, step: float) -> float:
    return _wnorm(w, xi - project_box(xi - step * G, M)) / step


def _free_set(xi, G, M: float, eps: float) -> np.ndarray:
    """Variables not held at a bound by the gradient."""
    return ~(((xi <= eps) & (G > 0)) | ((xi >= M - eps) & (G < 0)))


def _lbfgs_direction(G, free, w, pairs) -> np.ndarray:
    """Two-loop recursion in the weighted metric, restricted to the free set."""
    q = np.where(free, G, 0.0)
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * np.dot(w, np.where(free, s, 0.0) * q)
        q = q - a * np.where(free, y, 0.0)
        alphas.append(a)
    s, y, _ = pairs[-1]
    q = q * (np.dot(w, s * y) / np.dot(w, y * y))
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * np.dot(w, np.where(free, y, 0.0) * q)
        q = q + (a - b) * np.where(free, s, 0.0)
    return -q


def minimize_Ep(functional: ReducedFunctional, xi0, opt: OptimizerConfig,
                callback=None) -> StageResult:
    """Projected descent with Armijo backtracking on ``xi -> E_p``.

    Gradients are taken in the weighted L2 metric (``G = g / node_weights``).
    The search direction is the negative gradient (``method="spg"``, with
    Barzilai-Borwein step lengths) or a limited-memory BFGS direction on the
    variables not held at a bound (``method="lbfgs"``); trial points are
    projected onto ``[0, M]`` and accepted under a sufficient-decrease test.
    Stops when ``||xi - P(xi - t G)|| / t <= g_tol`` with ``t = pg_step``, after
    ``max_iters`` accepted steps, or when backtracking is exhausted.
    """
    M = functional.coeffs.M
    w = functional.grid.node_weights
    p = functional.params.p
    xi = project_box(xi0, M)
    records = []

    def record(it, J, pg, step, nback):
        ev = functional.evaluate(xi)
        inf = functional.energy_inf(xi)
        rec = {"record": "iter", "p": p, "iter": it, "E_p": J, "E_inf": inf.total,
               "misfit": list(ev.misfit), "misfit_inf": inf.misfit, "tikhonov": ev.tikhonov,
               "pg_norm": pg, "step": step, "backtracks": nback}
        records.append(rec)
        if callback is not None:
            callback(rec)
        log.info("p=%g iter=%d E_p=%.10e E_inf=%.6e pg=%.3e", p, it, J, inf.total, pg)

    status = "max_iters"
    pairs: list = []
    try:
        J, g = functional.value_and_grad(xi)
        G = g / w
        pg = projected_gradient_norm(xi, G, w, M, opt.pg_step)
        record(0, J, pg, 0.0, 0)
        bb = opt.step0
        it = 0
        while True:
            if pg <= opt.g_tol:
                status = "converged"
                break
            if it >= opt.max_iters:
                break
            if opt.method == "lbfgs" and pairs:
                d = _lbfgs_direction(G, _free_set(xi, G, M, 1e-12 * M), w, pairs)
                s = 1.0
                if np.dot(g, project_box(xi + 1e-6 * d, M) - xi) >= 0:
                    pairs.clear()
                    d, s = -G, opt.step0
            else:
                d, s = -G, bb
            accepted = False
            for nback in range(opt.max_backtracks):
                trial = project_box(xi + s * d, M)
                delta = trial - xi
                slope = float(np.dot(g, delta))
                if not np.any(delta) or slope >= 0:
                    break
                Jt = functional.value(trial)
                if Jt <= J + opt.c1 * slope:
                    accepted = True
                    break
                s *= opt.backtrack
            if not accepted:
                log.warning("p=%g: line search exhausted at iteration %d (slope %.3e)", p, it, slope)
                status = "line_search"
                break
            Jt, gt = functional.value_and_grad(trial)
            Gt = gt / w
            dG = Gt - G
            curv = float(np.dot(w, delta * dG))
            dn2 = float(np.dot(w, delta * delta))
            bb = min(max(dn2 / curv, opt.step_min), opt.step_max) if curv > 0 else opt.step_max
            if curv > 1e-12 * np.sqrt(dn2 * np.dot(w, dG * dG)):
                pairs.append((delta, dG, 1.0 / curv))
                del pairs[:-opt.memory]
            xi, J, g, G = trial, Jt, gt, Gt
            it += 1
            pg = projected_gradient_norm(xi, G, w, M, opt.pg_step)
            record(it, J, pg, s, nback)
    except SolverError as exc:
        log.error("p=%g: %s", p, exc)
        status = "solver_failure"
        if not records:
            return StageResult(p, xi, 0, math.nan, math.nan, [], [], math.nan, math.nan, status)
    last = records[-1]
    return StageResult(p, xi, last["iter"], last["E_p"], last["E_inf"], last["misfit"],
                       last["misfit_inf"], last["tikhonov"], last["pg_norm"], status, records)


def _stage_diagnostics(functional: ReducedFunctional, res: StageResult, seed: int) -> None:
    ev = functional.evaluate(res.xi)
    res.total_variation = total_variation(nu_measure(ev.state.traces, functional.data,
                                                     functional.params.p))
    rep = kkt_check(functional, res.xi, seed=seed)
    res.kkt = rep.as_dict()
    res.C_p = rep.C_p


def _multistart(functional, res: StageResult, opt, count: int) -> dict:
    M = functional.coeffs.M
    spread, best = 0.0, res.E_p
    ref = max(float(np.linalg.norm(res.xi)), 1e-300)
    for j in range(count):
        start = np.full_like(res.xi, M * (j + 1) / (count + 1))
        alt = minimize_Ep(functional, start, opt)
        if alt.succeeded:
            spread = max(spread, float(np.linalg.norm(alt.xi - res.xi)) / ref)
            best = min(best, alt.E_p)
    return {"starts": count, "max_relative_spread": spread, "best_E_p": best}


def p_continuation(functional: ReducedFunctional, schedule, xi0, opt: OptimizerConfig,
                   diagnostics: bool = True, multistart: int = 0, seed: int = 0,
                   callback=None, stage_callback=None) -> ReconstructionTrace:
    """Minimise ``E_p`` for each ``p`` in turn, warm-starting from the previous stage."""
    schedule = [float(p) for p in schedule]
    if not schedule:
        raise ValueError("empty p schedule")
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("p schedule must be strictly increasing")
    base = functional.params
    trace = ReconstructionTrace(schedule)
    xi = project_box(xi0, functional.coeffs.M)
    for k, p in enumerate(schedule):
        F = functional if p == base.p else functional.with_params(
            EnergyParams(p, base.m, base.alpha, base.M, base.dim))
        res = minimize_Ep(F, xi, opt, callback)
        if res.succeeded:
            try:
                if diagnostics:
                    _stage_diagnostics(F, res, seed + k)
                if multistart:
                    res.multistart = _multistart(F, res, opt, multistart)
            except SolverError as exc:
                log.error("p=%g diagnostics: %s", p, exc)
            xi = res.xi
        trace.stages.append(res)
        if stage_callback is not None:
            stage_callback(res)
    return trace
