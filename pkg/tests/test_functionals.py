from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluotomo.functionals import (EnergyParams, MeasurementData, dotted_norm_boundary,
                                  dotted_norm_volume, energy_inf, energy_inf_terms, energy_p,
                                  energy_p_terms, mu_field, nu_measure, reg_abs, tikhonov_gradient,
                                  total_variation)
from fluotomo.grid import boundary_subset, build_grid, discrete_hessian


def loop_boundary_norm(g, gamma, p):
    """Face-by-face trapezoid average of |g|_(p)^p (independent of node weights)."""
    pos = {k: i for i, k in enumerate(gamma.nodes)}
    total = area = 0.0
    for face, a in zip(gamma.faces, gamma.areas):
        vals = [(np.sum(g[pos[k]] ** 2) + p**-2.0) ** (p / 2) for k in face]
        total += a * sum(vals) / len(vals)
        area += a
    return (total / area) ** (1 / p)


def loop_volume_norm(grid, V, m):
    flat = V.reshape(grid.n_nodes, -1)
    cell_vol = float(np.prod(grid.h))
    total = 0.0
    for cell in grid.cells:
        total += cell_vol * np.mean([(np.sum(flat[k] ** 2) + m**-2.0) ** (m / 2) for k in cell])
    return (total / grid.volume) ** (1 / m)


@pytest.fixture
def setup():
    grid = build_grid((0, 0), (1, 2), (7, 9))
    gammas = [boundary_subset(grid, "all"), boundary_subset(grid, "x0_min+x1_max")]
    rng = np.random.default_rng(11)
    traces = [rng.standard_normal((len(g.nodes), 2)) for g in gammas]
    return grid, gammas, traces, rng


def test_reg_abs():
    assert reg_abs(np.zeros(2), 2) == 0.5
    assert reg_abs(np.array([3.0, 4.0]), math.inf) == 5.0
    with pytest.raises(ValueError):
        reg_abs(np.array([1.0, 0.0]), 1)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(2, 1e4))
def test_reg_abs_bounds(a, b, p):
    w = np.array([a, b])
    r = reg_abs(w, p)
    assert np.linalg.norm(w) <= r <= np.linalg.norm(w) + 1 / p + 1e-12
    assert r >= 1 / p


def test_dotted_norms_trivial(setup):
    grid, gammas, _, _ = setup
    g = gammas[1]
    c = np.array([0.3, -1.2])
    assert dotted_norm_boundary(np.tile(c, (len(g.nodes), 1)), g, 6) == pytest.approx(reg_abs(c, 6), rel=1e-14)
    assert dotted_norm_boundary(np.zeros((len(g.nodes), 2)), g, 6) == pytest.approx(1 / 6, rel=1e-14)
    assert dotted_norm_volume(grid, np.zeros((grid.n_nodes, 2, 2)), 5) == pytest.approx(0.2, rel=1e-14)
    C = np.array([[1.0, 2.0], [2.0, -0.5]])
    V = np.broadcast_to(C, (grid.n_nodes, 2, 2))
    assert dotted_norm_volume(grid, V, 5) == pytest.approx(reg_abs(C.ravel(), 5), rel=1e-14)


@pytest.mark.parametrize("p", [4.0, 9.5, 64.0])
def test_dotted_norms_match_loop_oracle(setup, p):
    grid, gammas, traces, rng = setup
    for g, t in zip(gammas, traces):
        assert dotted_norm_boundary(t, g, p) == pytest.approx(loop_boundary_norm(t, g, p), rel=1e-12)
    V = rng.standard_normal((grid.n_nodes, 2, 2))
    assert dotted_norm_volume(grid, V, p) == pytest.approx(loop_volume_norm(grid, V, p), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(2, 50), st.floats(0, 30))
def test_power_mean_monotone(seed, q, dp):
    grid = build_grid((0, 0), (1, 1), (5, 6))
    g = boundary_subset(grid, "all")
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((len(g.nodes), 2)) * rng.uniform(0.01, 10)
    p = q + dp
    a = reg_abs(t, p)
    w = g.node_weights / g.measure
    lower = np.dot(w, a**q) ** (1 / q)
    assert lower <= dotted_norm_boundary(t, g, p) * (1 + 1e-12)


def test_energy_floor(setup):
    grid, gammas, traces, _ = setup
    data = MeasurementData(gammas, traces)
    xi = np.zeros(grid.n_nodes)
    for p, m, alpha in [(4, 5, 1e-3), (8, 5, 0.1), (16, 3.5, 2.0)]:
        par = EnergyParams(p, m, alpha, 1.0)
        assert abs(energy_p(traces, xi, data, par, grid) - (2 / p + alpha / m)) <= 1e-12
        assert abs(energy_inf(traces, xi, data, par, grid) - alpha / m) <= 1e-15


def test_tikhonov_linear_in_alpha(setup):
    grid, gammas, traces, rng = setup
    data = MeasurementData(gammas, [t + 0.1 for t in traces])
    xi = rng.uniform(0, 1, grid.n_nodes)
    a = energy_p_terms(traces, xi, data, EnergyParams(4, 5, 0.01, 1.0), grid)
    b = energy_p_terms(traces, xi, data, EnergyParams(4, 5, 0.02, 1.0), grid)
    assert b.tikhonov == 2 * a.tikhonov
    assert b.misfit == a.misfit


def test_energy_inf_spike(setup):
    grid, gammas, traces, _ = setup
    data = MeasurementData(gammas, traces)
    spiked = [t.copy() for t in traces]
    spiked[0][3] += [0.6, 0.8]
    terms = energy_inf_terms(spiked, np.zeros(grid.n_nodes), data, EnergyParams(4, 5, 1e-3, 1.0), grid)
    assert terms.misfit == [pytest.approx(1.0, rel=1e-15), 0.0]


def test_energy_p_tends_to_energy_inf(setup):
    grid, gammas, traces, rng = setup
    data = MeasurementData(gammas, [t + rng.standard_normal(t.shape) for t in traces])
    xi = rng.uniform(0, 1, grid.n_nodes)
    gaps = []
    for p in (4, 16, 64, 256):
        par = EnergyParams(p, 5, 1e-3, 1.0)
        Ep, Einf = energy_p(traces, xi, data, par, grid), energy_inf(traces, xi, data, par, grid)
        assert Ep <= Einf + 2 / p + 1e-12
        # averaging defect: the max node carries at least its own weight fraction
        defect = sum((1 - (g.node_weights.min() / g.measure) ** (1 / p)) * np.abs(
            reg_abs(t - d, p)).max() for g, t, d in zip(gammas, traces, data.traces))
        assert Einf - Ep <= defect + 1e-12
        gaps.append(abs(Ep - Einf))
    assert gaps == sorted(gaps, reverse=True)


def test_mu_trivial(setup):
    grid = setup[0]
    C = np.array([[0.5, -1.0], [-1.0, 2.0]])
    V = np.broadcast_to(C, (grid.n_nodes, 2, 2)).copy()
    assert np.allclose(mu_field(grid, V, 5), C / (grid.volume * reg_abs(C.ravel(), 5)), rtol=1e-13)
    assert not np.any(mu_field(grid, np.zeros_like(V), 5))


@pytest.mark.parametrize("m", [3.0, 5.0, 12.0])
def test_mu_is_derivative_of_volume_norm(setup, m):
    grid, _, _, rng = setup
    V, W = rng.standard_normal((2, grid.n_nodes, 2, 2))
    eps = 1e-5
    fd = (dotted_norm_volume(grid, V + eps * W, m) - dotted_norm_volume(grid, V - eps * W, m)) / (2 * eps)
    pairing = np.sum(grid.node_weights[:, None, None] * W * mu_field(grid, V, m))
    assert abs(fd - pairing) <= 1e-7 * max(1.0, abs(pairing))


@pytest.mark.parametrize("p", [4.0, 8.0, 30.0])
def test_nu_is_derivative_of_misfit(setup, p):
    grid, gammas, traces, rng = setup
    data = MeasurementData(gammas, [t + 0.3 * rng.standard_normal(t.shape) for t in traces])
    nu = nu_measure(traces, data, p)
    dirs = [rng.standard_normal(t.shape) for t in traces]
    eps = 1e-5

    def misfit(tr):
        return sum(energy_p_terms(tr, np.zeros(grid.n_nodes), data, EnergyParams(p, 5, 1e-3, 1.0), grid).misfit)

    fd = (misfit([t + eps * d for t, d in zip(traces, dirs)])
          - misfit([t - eps * d for t, d in zip(traces, dirs)])) / (2 * eps)
    assert abs(fd - nu.pair(dirs)) <= 1e-7 * max(1.0, abs(fd))


def test_nu_zero_for_exact_fit(setup):
    grid, gammas, traces, _ = setup
    nu = nu_measure(traces, MeasurementData(gammas, traces), 8)
    assert total_variation(nu) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([4.0, 8.0, 16.0, 64.0]), st.floats(1e-4, 1e4))
def test_total_variation_bound(seed, p, scale):
    grid = build_grid((0, 0), (1, 1), (6, 5))
    rng = np.random.default_rng(seed)
    gammas = [boundary_subset(grid, s) for s in ("all", "x0_min", "x1_max+x0_max")]
    traces = [rng.standard_normal((len(g.nodes), 2)) for g in gammas]
    resid = [scale * rng.standard_normal(t.shape) * (rng.uniform(size=(len(t), 1)) < 0.5) for t in traces]
    data = MeasurementData(gammas, [t - r for t, r in zip(traces, resid)])
    assert total_variation(nu_measure(traces, data, p)) <= 3 + 1e-12


def test_energy_gradient_fd(setup):
    """Full derivative of the discrete energy with respect to (traces, xi)."""
    grid, gammas, traces, rng = setup
    data = MeasurementData(gammas, [t + 0.2 * rng.standard_normal(t.shape) for t in traces])
    par = EnergyParams(6, 5, 0.05, 1.0)
    xi = rng.uniform(0, 1, grid.n_nodes)
    dt = [rng.standard_normal(t.shape) for t in traces]
    dx = rng.standard_normal(grid.n_nodes)
    eps = 1e-5
    Ep = lambda s: energy_p([t + s * d for t, d in zip(traces, dt)], xi + s * dx, data, par, grid)  # noqa: E731
    fd = (Ep(eps) - Ep(-eps)) / (2 * eps)
    exact = nu_measure(traces, data, par.p).pair(dt) + np.dot(tikhonov_gradient(grid, xi, par), dx)
    assert abs(fd - exact) <= 1e-6 * abs(exact)


def test_tikhonov_gradient_matches_mu(setup):
    grid, _, _, rng = setup
    xi = rng.uniform(0, 1, grid.n_nodes)
    par = EnergyParams(4, 5, 0.3, 1.0)
    eta = rng.standard_normal(grid.n_nodes)
    mu = mu_field(grid, discrete_hessian(grid, xi), 5)
    lhs = np.dot(tikhonov_gradient(grid, xi, par), eta)
    rhs = 0.3 * np.sum(grid.node_weights[:, None, None] * discrete_hessian(grid, eta) * mu)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_parameter_gates():
    with pytest.raises(ValueError, match="p must be >= 2"):
        EnergyParams(1.5, 5, 1e-3, 1.0)
    with pytest.raises(ValueError, match="m must be > 1"):
        EnergyParams(4, 1.0, 1e-3, 1.0)
    with pytest.warns(UserWarning, match="m > n"):
        EnergyParams(8, 2.5, 1e-3, 1.0, dim=3)
    with pytest.warns(UserWarning, match="threshold"):
        EnergyParams(5, 5, 1e-3, 1.0, dim=3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        EnergyParams(4, 5, 1e-3, 1.0, dim=2)
        EnergyParams(7, 5, 1e-3, 1.0, dim=3)


def test_measurement_data_validation(setup):
    grid, gammas, traces, _ = setup
    with pytest.raises(ValueError):
        MeasurementData(gammas, traces[:1])
    bad = [traces[0], np.full_like(traces[1], np.nan)]
    with pytest.raises(ValueError):
        MeasurementData(gammas, bad)
    data = MeasurementData(gammas, traces)
    with pytest.raises(ValueError, match="expected 2 traces"):
        energy_p(traces[:1], np.zeros(grid.n_nodes), data, EnergyParams(4, 5, 1e-3, 1.0), grid)
