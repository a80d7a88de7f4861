"""Adjoint states, tangent-linear solves, reduced gradient and first-order diagnostics.

The adjoints are exact transposes of the discrete forward operators, so the
reduced gradient is the exact derivative of the discrete map
``xi -> E_p(v(xi), xi)``.

Sign convention: with ``psi_i`` solving ``B_xi^T psi_i = nu_i`` and ``phi_i``
solving ``B_xi^T phi_i = xi H^T psi_i``, the misfit part of the gradient has
density ``(H u).psi - rdot (Du:Dphi + Dv:Dpsi) - u.phi - v.psi``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .coefficients import ProblemCoefficients
from .functionals import (EnergyParams, MeasurementData, energy_inf_terms, energy_p_terms,
                          nu_measure, tikhonov_gradient, total_variation)
from .grid import Grid
from .robin import (DEFAULT_TOL, BlockOperator, ForwardState, SolverError, emission_load,
                    fot_operator, fot_quad_coefficients, forward, h_at_quad, solve_linear)

log = logging.getLogger("fluotomo.adjoint")

CONVENTIONS = ("fd", "scaled")


def _map(fn, n: int, threads: int):
    if threads > 1 and n > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, range(n)))
    return [fn(i) for i in range(n)]


@dataclass
class AdjointState:
    phi: list
    psi: list


def measure_load(grid: Grid, gamma, density: np.ndarray) -> np.ndarray:
    """Nodal load of a boundary measure component given by its nodal density."""
    out = np.zeros((grid.n_nodes, 2))
    out[gamma.nodes] = gamma.node_weights[:, None] * density
    return out


def solve_adjoint_emission(coeffs: ProblemCoefficients, xi, gamma, density, op=None,
                           tol: float = DEFAULT_TOL) -> np.ndarray:
    """``psi`` with ``B_xi[w, psi] = <w, nu>`` for every test field ``w``."""
    if op is None:
        op = fot_operator(coeffs, xi)
    psi, _ = solve_linear(op, measure_load(coeffs.grid, gamma, density), tol, transpose=True)
    return psi


def solve_adjoint_excitation(coeffs: ProblemCoefficients, xi, psi, op=None,
                             tol: float = DEFAULT_TOL) -> np.ndarray:
    """``phi`` with ``B_xi[z, phi] = int xi (H z).psi`` for every test field ``z``."""
    if op is None:
        op = fot_operator(coeffs, xi)
    phi, _ = solve_linear(op, emission_load(coeffs, xi, psi, transpose=True), tol, transpose=True)
    return phi


def coefficient_derivative_load(coeffs: ProblemCoefficients, xi, eta, w) -> np.ndarray:
    """Nodal vector of ``int rdot eta Dw:DN_k + eta w N_k`` (derivative of ``B_xi w`` along ``eta``)."""
    grid = coeffs.grid
    _, _, rdot, _ = fot_quad_coefficients(coeffs, xi)
    eq = grid.at_quad(np.asarray(eta, dtype=float))
    flux = (rdot * eq)[..., None, None] * grid.grad_at_quad(w)
    return grid.scatter_quad_grad(flux) + grid.scatter_quad(eq[..., None] * grid.at_quad(w))


def tangent_linear(coeffs: ProblemCoefficients, xi, eta, state: ForwardState,
                   tol: float = DEFAULT_TOL, threads: int = 1):
    """Directional derivatives ``(z_i, w_i)`` of ``(u_i, v_i)`` along ``eta``."""
    op = state.op

    def one(i):
        u, v = state.u[i], state.v[i]
        z, _ = solve_linear(op, -coefficient_derivative_load(coeffs, xi, eta, u), tol)
        rhs = (-coefficient_derivative_load(coeffs, xi, eta, v)
               + emission_load(coeffs, eta, u) + emission_load(coeffs, xi, z))
        w, _ = solve_linear(op, rhs, tol)
        return z, w

    out = _map(one, len(state.u), threads)
    return [o[0] for o in out], [o[1] for o in out]


def solve_adjoints(coeffs, xi, state: ForwardState, nu, tol=DEFAULT_TOL, threads=1) -> AdjointState:
    def one(i):
        try:
            psi = solve_adjoint_emission(coeffs, xi, nu.gammas[i], nu.densities[i], state.op, tol)
            phi = solve_adjoint_excitation(coeffs, xi, psi, state.op, tol)
        except SolverError as exc:
            raise SolverError(f"adjoint source {i}: {exc}", exc.report) from exc
        return phi, psi

    out = _map(one, len(state.u), threads)
    return AdjointState([o[0] for o in out], [o[1] for o in out])


def misfit_gradient(coeffs: ProblemCoefficients, xi, state: ForwardState,
                    adjoints: AdjointState) -> np.ndarray:
    """Nodal misfit gradient: ``int eta * density`` tested against every hat function."""
    grid = coeffs.grid
    if len(adjoints.psi) != len(state.u):
        raise ValueError("adjoint and forward states have different source counts")
    _, _, rdot, _ = fot_quad_coefficients(coeffs, xi)
    Hq = h_at_quad(coeffs)
    dens = np.zeros(rdot.shape)
    for u, v, phi, psi in zip(state.u, state.v, adjoints.phi, adjoints.psi):
        uq, vq, fq, sq = (grid.at_quad(a) for a in (u, v, phi, psi))
        Du, Dv, Df, Ds = (grid.grad_at_quad(a) for a in (u, v, phi, psi))
        dens += np.einsum("cqij,cqj,cqi->cq", Hq, uq, sq)
        dens -= rdot * (np.einsum("cqjd,cqjd->cq", Du, Df) + np.einsum("cqjd,cqjd->cq", Dv, Ds))
        dens -= np.einsum("cqj,cqj->cq", uq, fq) + np.einsum("cqj,cqj->cq", vq, sq)
    return grid.scatter_quad(dens)


def gradient_prefactors(params: EnergyParams, convention: str = "fd") -> tuple:
    """Weights of the (misfit, Tikhonov-shape) parts of the derivative.

    ``"fd"`` gives the exact derivative of the discrete energy; ``"scaled"``
    gives the factors ``p`` and ``alpha m``.  Both multiply the Tikhonov
    shape ``D2^T (w mu)``, which carries no ``alpha``.
    """
    if convention == "fd":
        return 1.0, params.alpha
    if convention == "scaled":
        return params.p, params.alpha * params.m
    raise ValueError(f"unknown gradient convention {convention!r}")


def reduced_gradient(coeffs: ProblemCoefficients, xi, state: ForwardState, adjoints: AdjointState,
                     params: EnergyParams, convention: str = "fd") -> np.ndarray:
    cm, ct = gradient_prefactors(params, convention)
    grid = coeffs.grid
    shape = tikhonov_gradient(grid, xi, params) / params.alpha
    return cm * misfit_gradient(coeffs, xi, state, adjoints) + ct * shape


@dataclass
class Evaluation:
    xi: np.ndarray
    state: ForwardState
    E_p: float
    misfit: list
    tikhonov: float
    grad: np.ndarray | None = None
    nu: object = None
    adjoints: AdjointState | None = None


class ReducedFunctional:
    """``xi -> E_p(v(xi), xi)`` with cached forward/adjoint evaluations."""

    def __init__(self, coeffs: ProblemCoefficients, sources: list, data: MeasurementData,
                 params: EnergyParams, tol: float = DEFAULT_TOL, threads: int = 1):
        if len(sources) != data.N:
            raise ValueError("one source per measurement set is required")
        self.coeffs = coeffs
        self.sources = sources
        self.data = data
        self.params = params
        self.tol = tol
        self.threads = threads
        self._last: Evaluation | None = None
        self.n_forward = 0
        self.n_adjoint = 0

    @property
    def grid(self) -> Grid:
        return self.coeffs.grid

    def with_params(self, params: EnergyParams) -> "ReducedFunctional":
        return ReducedFunctional(self.coeffs, self.sources, self.data, params, self.tol, self.threads)

    def _evaluate(self, xi) -> Evaluation:
        xi = np.asarray(xi, dtype=float)
        last = self._last
        if last is not None and np.array_equal(last.xi, xi):
            return last
        st = forward(self.coeffs, xi, self.sources, self.data.gammas, self.tol, self.threads)
        self.n_forward += 1
        terms = energy_p_terms(st.traces, xi, self.data, self.params, self.grid)
        self._last = Evaluation(xi.copy(), st, terms.total, terms.misfit, terms.tikhonov)
        return self._last

    def state(self, xi) -> ForwardState:
        return self._evaluate(xi).state

    def value(self, xi) -> float:
        return self._evaluate(xi).E_p

    def evaluate(self, xi) -> Evaluation:
        return self._evaluate(xi)

    def energy_inf(self, xi):
        ev = self._evaluate(xi)
        return energy_inf_terms(ev.state.traces, ev.xi, self.data, self.params, self.grid)

    def value_and_grad(self, xi):
        ev = self._evaluate(xi)
        if ev.grad is None:
            ev.nu = nu_measure(ev.state.traces, self.data, self.params.p)
            ev.adjoints = solve_adjoints(self.coeffs, ev.xi, ev.state, ev.nu, self.tol, self.threads)
            self.n_adjoint += 1
            ev.grad = reduced_gradient(self.coeffs, ev.xi, ev.state, ev.adjoints, self.params)
        return ev.E_p, ev.grad


# -- first-order diagnostics -----------------------------------------------------


@dataclass
class KKTReport:
    p: float
    eq_5_21_residual: float
    eq_5_22_residual: float
    ineq_5_20_min_slack: float
    ineq_5_20_scaled_slack: float
    C_p: float
    total_variation: float
    n_samples: int
    convention: str = "fd"
    slacks: list = field(default_factory=list)

    def passed(self, tol: float, g_tol: float) -> bool:
        return (self.eq_5_21_residual <= 10 * tol and self.eq_5_22_residual <= 10 * tol
                and self.ineq_5_20_scaled_slack >= -g_tol)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("slacks")
        return d


def _weighted_norm(grid: Grid, a) -> float:
    return float(np.sqrt(np.dot(grid.node_weights, np.asarray(a) ** 2)))


def default_eta_samples(xi, M: float, rng: np.random.Generator, grad=None, n_random: int = 10):
    """Admissible test fields: ``xi``, the two constant box faces, random fields and a descent probe."""
    xi = np.asarray(xi, dtype=float)
    samples = [xi.copy(), np.zeros_like(xi), np.full_like(xi, M)]
    samples += [rng.uniform(0.0, M, xi.shape) for _ in range(n_random)]
    if grad is not None and np.any(grad):
        step = 0.1 * M / np.max(np.abs(grad))
        samples.append(np.clip(xi - step * grad, 0.0, M))
    return samples


def _form_residual(lhs: float, rhs: float, w, b) -> float:
    denom = np.linalg.norm(w) * np.linalg.norm(b)
    return abs(lhs - rhs) / denom if denom > 0 else abs(lhs - rhs)


def sobolev_norm(grid: Grid, fields: list, q: float) -> float:
    """``||f||_{L^q} + ||Df||_{L^q}`` with the Frobenius norm over sources and components."""
    vals = np.sqrt(sum(np.sum(grid.at_quad(f) ** 2, axis=-1) for f in fields))
    grads = np.sqrt(sum(np.sum(grid.grad_at_quad(f) ** 2, axis=(-2, -1)) for f in fields))
    w = grid.quad_weight
    return float((w * np.sum(vals**q)) ** (1 / q) + (w * np.sum(grads**q)) ** (1 / q))


def multiplier_bound(grid: Grid, adjoints: AdjointState, m: float) -> float:
    """``C_p = ||phi||_{W^{1, m/(m-2)}} + ||psi||_{W^{1,1}}``."""
    return sobolev_norm(grid, adjoints.phi, m / (m - 2)) + sobolev_norm(grid, adjoints.psi, 1.0)


def kkt_check(functional: ReducedFunctional, xi, eta_samples=None, n_tests: int = 20,
              seed: int = 0, convention: str = "fd") -> KKTReport:
    """Evaluate the discrete first-order relations at a (converged) iterate.

    The variational inequality is tested as ``<g, eta - xi>`` (nodal pairing);
    ``ineq_5_20_scaled_slack`` divides each slack by ``||eta - xi||`` in the
    weighted L2 norm.  Under ``convention="scaled"`` the gradient is formed
    with the factors ``1`` and ``alpha m / p``.
    """
    params = functional.params
    coeffs, grid = functional.coeffs, functional.grid
    xi = np.asarray(xi, dtype=float)
    functional.value_and_grad(xi)
    ev = functional.evaluate(xi)
    st, adj, nu = ev.state, ev.adjoints, ev.nu
    rng = np.random.default_rng(seed)

    op: BlockOperator = st.op
    r21 = r22 = 0.0
    for _ in range(n_tests):
        for i in range(len(st.u)):
            w = rng.standard_normal((grid.n_nodes, 2))
            g = nu.gammas[i]
            lhs = float(np.sum(g.node_weights[:, None] * nu.densities[i] * w[g.nodes]))
            b = measure_load(grid, g, nu.densities[i])
            r21 = max(r21, _form_residual(lhs, op.form(w, adj.psi[i]), w, b))
            z = rng.standard_normal((grid.n_nodes, 2))
            b2 = emission_load(coeffs, xi, adj.psi[i], transpose=True)
            rhs = float(np.sum(b2 * z))
            r22 = max(r22, _form_residual(op.form(z, adj.phi[i]), rhs, z, b2))

    if convention == "scaled":
        grad = reduced_gradient(coeffs, xi, st, adj, params, "scaled") / params.p
    else:
        grad = reduced_gradient(coeffs, xi, st, adj, params, convention)
    if eta_samples is None:
        eta_samples = default_eta_samples(xi, coeffs.M, rng, grad=grad / grid.node_weights)
    slacks, scaled = [], []
    for eta in eta_samples:
        d = np.asarray(eta, dtype=float) - xi
        s = float(np.dot(grad, d))
        slacks.append(s)
        scale = _weighted_norm(grid, d)
        scaled.append(s / scale if scale > 0 else 0.0)
    return KKTReport(
        p=params.p,
        eq_5_21_residual=float(r21),
        eq_5_22_residual=float(r22),
        ineq_5_20_min_slack=float(min(slacks)),
        ineq_5_20_scaled_slack=float(min(scaled)),
        C_p=multiplier_bound(grid, adj, params.m),
        total_variation=total_variation(nu),
        n_samples=len(slacks),
        convention=convention,
        slacks=slacks,
    )
