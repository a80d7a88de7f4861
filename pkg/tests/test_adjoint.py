from __future__ import annotations

import numpy as np
import pytest

from conftest import params, small_problem
from fluotomo.adjoint import (ReducedFunctional, default_eta_samples, gradient_prefactors,
                              kkt_check, measure_load, misfit_gradient, reduced_gradient,
                              solve_adjoint_emission, solve_adjoint_excitation, tangent_linear)
from fluotomo.coefficients import constant_coefficients
from fluotomo.functionals import MeasurementData, tikhonov_gradient
from fluotomo.grid import boundary_subset, build_grid
from fluotomo.robin import DEFAULT_TOL, forward, fot_operator, solve_linear


def test_zero_density_gives_zero_adjoints(problem):
    c, _, data, xi, _ = problem
    g = data.gammas[0]
    psi = solve_adjoint_emission(c, xi, g, np.zeros((len(g.nodes), 2)))
    assert not np.any(psi)
    assert not np.any(solve_adjoint_excitation(c, xi, psi))


def test_exact_fit_gives_pure_tikhonov_gradient(problem):
    c, sources, data, xi, _ = problem
    st = forward(c, xi, sources, data.gammas)
    fit = MeasurementData(data.gammas, st.traces)
    par = params(4)
    F = ReducedFunctional(c, sources, fit, par)
    _, grad = F.value_and_grad(xi)
    assert np.allclose(grad, tikhonov_gradient(c.grid, xi, par), rtol=0, atol=1e-15)


def test_transpose_matches_plain_solve_for_symmetric_operator():
    g = build_grid((0, 0), (1, 1), (8, 7))
    c = constant_coefficients(g, A=0.4, k=(0.6, 0.0), gamma=0.9)
    xi = np.random.default_rng(2).uniform(0, 1, g.n_nodes)
    gam = boundary_subset(g, "all")
    dens = np.random.default_rng(3).standard_normal((len(gam.nodes), 2))
    psi = solve_adjoint_emission(c, xi, gam, dens)
    plain, _ = solve_linear(fot_operator(c, xi), measure_load(g, gam, dens))
    assert np.allclose(psi, plain, rtol=1e-10, atol=1e-12)


def test_adjoint_residuals(problem):
    c, sources, data, xi, _ = problem
    rep = kkt_check(ReducedFunctional(c, sources, data, params(4)), xi, n_tests=20)
    assert rep.eq_5_21_residual <= 10 * DEFAULT_TOL
    assert rep.eq_5_22_residual <= 10 * DEFAULT_TOL
    assert np.isfinite(rep.C_p) and rep.C_p > 0
    assert rep.total_variation <= 2 + 1e-12


def test_tangent_linear_matches_fd(problem):
    c, sources, data, xi, rng = problem
    eta = rng.standard_normal(c.grid.n_nodes)
    st = forward(c, xi, sources, data.gammas)
    zs, ws = tangent_linear(c, xi, eta, st)
    eps = 1e-5
    plus = forward(c, xi + eps * eta, sources, data.gammas)
    minus = forward(c, xi - eps * eta, sources, data.gammas)
    for i in range(len(sources)):
        fz = (plus.u[i] - minus.u[i]) / (2 * eps)
        fw = (plus.v[i] - minus.v[i]) / (2 * eps)
        assert np.linalg.norm(fz - zs[i]) <= 1e-6 * np.linalg.norm(zs[i])
        assert np.linalg.norm(fw - ws[i]) <= 1e-6 * np.linalg.norm(ws[i])


def test_tangent_and_adjoint_agree(problem):
    c, sources, data, xi, rng = problem
    F = ReducedFunctional(c, sources, data, params(6))
    F.value_and_grad(xi)
    ev = F.evaluate(xi)
    eta = rng.standard_normal(c.grid.n_nodes)
    _, ws = tangent_linear(c, xi, eta, ev.state)
    tl = ev.nu.pair([w[g.nodes] for w, g in zip(ws, data.gammas)])
    ad = float(misfit_gradient(c, xi, ev.state, ev.adjoints) @ eta)
    assert abs(tl - ad) <= 1e-10 * abs(ad)


@pytest.mark.parametrize("p", [4.0, 8.0])
@pytest.mark.parametrize("n_sources", [1, 2])
def test_reduced_gradient_fd(p, n_sources):
    c, sources, data, xi, rng = small_problem(n_sources=n_sources, seed=int(p) + n_sources)
    F = ReducedFunctional(c, sources, data, params(p, alpha=1e-2))
    _, grad = F.value_and_grad(xi)
    eps = 1e-5
    for k in rng.choice(c.grid.n_nodes, 3, replace=False):
        e = np.zeros(c.grid.n_nodes)
        e[k] = 1.0
        fd = (F.value(xi + eps * e) - F.value(xi - eps * e)) / (2 * eps)
        assert abs(fd - grad[k]) <= 1e-6 * max(abs(fd), 1e-8)
    eta = rng.standard_normal(c.grid.n_nodes)
    fd = (F.value(xi + eps * eta) - F.value(xi - eps * eta)) / (2 * eps)
    assert abs(fd - grad @ eta) <= 1e-6 * abs(fd)


def test_prefactor_conventions(problem):
    c, sources, data, xi, _ = problem
    par = params(8, alpha=0.05)
    assert gradient_prefactors(par, "fd") == (1.0, 0.05)
    assert gradient_prefactors(par, "scaled") == (8.0, 0.05 * 5.0)
    with pytest.raises(ValueError):
        gradient_prefactors(par, "other")
    F = ReducedFunctional(c, sources, data, par)
    _, g_fd = F.value_and_grad(xi)
    ev = F.evaluate(xi)
    g_scaled = reduced_gradient(c, xi, ev.state, ev.adjoints, par, "scaled")
    mis = misfit_gradient(c, xi, ev.state, ev.adjoints)
    shape = tikhonov_gradient(c.grid, xi, par) / par.alpha
    assert np.allclose(g_fd, mis + 0.05 * shape, rtol=1e-13, atol=1e-16)
    assert np.allclose(g_scaled, 8 * mis + 0.25 * shape, rtol=1e-13, atol=1e-16)


def test_kkt_slack_zero_at_eta_equal_xi(problem):
    c, sources, data, xi, _ = problem
    F = ReducedFunctional(c, sources, data, params(4))
    for conv in ("fd", "scaled"):
        rep = kkt_check(F, xi, eta_samples=[xi.copy()], n_tests=1, convention=conv)
        assert rep.slacks == [0.0]
        assert rep.ineq_5_20_scaled_slack == 0.0


def test_kkt_fails_away_from_stationarity(problem):
    c, sources, data, xi, _ = problem
    F = ReducedFunctional(c, sources, data, params(4))
    rep = kkt_check(F, xi, n_tests=2)
    assert rep.ineq_5_20_min_slack < 0
    assert not rep.passed(DEFAULT_TOL, 1e-3)
    assert rep.n_samples == 14


def test_default_eta_samples_admissible():
    rng = np.random.default_rng(0)
    xi = rng.uniform(0, 3, 50)
    for eta in default_eta_samples(xi, 3.0, rng, grad=rng.standard_normal(50)):
        assert eta.min() >= 0 and eta.max() <= 3.0


def test_caching_and_threads(problem):
    c, sources, data, xi, _ = problem
    F = ReducedFunctional(c, sources, data, params(4))
    F.value(xi)
    F.value_and_grad(xi)
    F.value(xi)
    assert (F.n_forward, F.n_adjoint) == (1, 1)
    F2 = ReducedFunctional(c, sources, data, params(4), threads=2)
    assert np.array_equal(F.value_and_grad(xi)[1], F2.value_and_grad(xi)[1])


def test_source_count_mismatch(problem):
    c, sources, data, _, _ = problem
    with pytest.raises(ValueError):
        ReducedFunctional(c, sources[:1], data, params(4))
