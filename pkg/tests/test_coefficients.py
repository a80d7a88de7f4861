from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluotomo.coefficients import (CoefficientError, ComplexCoeff, DiffusionCoeff, assemble_A_xi,
                                   assemble_K_xi, biomedical_direct, constant_coefficients,
                                   eval_r, eval_r_dot, preset_biomedical, rotation)
from fluotomo.grid import build_grid


def _diff(A=1.0, lam=1.0, kappa=1.0, n_nodes=1, dim=2):
    return DiffusionCoeff(np.broadcast_to(A * np.eye(dim), (n_nodes, dim, dim)).copy(), lam,
                          np.full(n_nodes, kappa))


def test_r_values():
    assert eval_r(_diff(lam=1, kappa=1), 0.0, 0) == pytest.approx(1.0)
    assert eval_r(_diff(lam=2, kappa=1), 1.0, 0) == pytest.approx(1.0)
    ts = np.array([0.0, 1.0, 10.0, 1e3, 1e6])
    vals = eval_r(_diff(), ts, 0)
    assert np.all(np.diff(vals) < 0) and np.all(vals > 0)


def test_r_dot_values_and_fd():
    assert eval_r_dot(_diff(lam=1, kappa=2), 0.0, 0) == pytest.approx(-0.25)
    assert eval_r_dot(_diff(lam=1, kappa=1), 1.0, 0) == pytest.approx(-0.25)
    d = _diff(lam=1.0, kappa=1.0)
    for t in (0.1, 0.5, 2.0):
        fd = (eval_r(d, t + 1e-4, 0) - eval_r(d, t - 1e-4, 0)) / 2e-4
        assert abs(fd - eval_r_dot(d, t, 0)) < 1e-8


def test_negative_t_rejected():
    with pytest.raises(CoefficientError):
        eval_r(_diff(), -0.1, 0)


@given(st.floats(0, 1e6), st.floats(0.01, 10), st.floats(0.01, 10))
def test_r_bounds(t, lam, a0):
    d = _diff(lam=lam, kappa=a0)
    r = eval_r(d, t, 0)
    assert 0 < r <= lam / a0 * (1 + 1e-15)
    assert eval_r_dot(d, t, 0) < 0


def test_A_xi():
    d = _diff(n_nodes=3)
    assert np.allclose(assemble_A_xi(d, np.zeros(3)), 2 * np.eye(2))
    M = 1e6
    assert np.abs(assemble_A_xi(d, np.full(3, M)) - np.eye(2)).max() <= (1.0 / (1.0 + M)) * (1 + 1e-9)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_A_xi_stays_spd_and_dominates_A(seed):
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((5, 3, 3))
    A = Q @ np.swapaxes(Q, 1, 2) + 1e-3 * np.eye(3)
    d = DiffusionCoeff(A, 0.5, rng.uniform(0.1, 2.0, 5))
    B = assemble_A_xi(d, rng.uniform(0, 3.0, 5), M=3.0)
    assert np.allclose(B, np.swapaxes(B, 1, 2))
    assert np.all(np.linalg.eigvalsh(B)[:, 0] >= np.linalg.eigvalsh(A)[:, 0] - 1e-12)


def test_K_xi():
    K = ComplexCoeff(np.ones(1), np.zeros(1))
    assert np.allclose(assemble_K_xi(K, np.zeros(1)), np.eye(2))
    K = ComplexCoeff(np.ones(1), np.full(1, 2.0))
    assert np.allclose(assemble_K_xi(K, np.full(1, 3.0)), [[4, -2], [2, 4]])


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_rotation_is_complex_multiplication(hr, hi, w1, w2):
    prod = (hr + 1j * hi) * (w1 + 1j * w2)
    out = ComplexCoeff(np.array(hr), np.array(hi)).apply(np.array([w1, w2]))
    assert out[0] == prod.real and out[1] == prod.imag
    assert np.allclose(rotation(hr, hi) @ np.array([w1, w2]), out, rtol=1e-14, atol=1e-14)
    # (K w).w = k_R |w|^2
    assert np.dot(out, [w1, w2]) == pytest.approx(hr * (w1**2 + w2**2), abs=1e-12)


def test_invalid_diffusion():
    with pytest.raises(CoefficientError, match="symmetric"):
        DiffusionCoeff(np.array([[[1.0, 1.0], [0.0, 1.0]]]), 1.0, np.ones(1))
    with pytest.raises(CoefficientError, match="lambda"):
        DiffusionCoeff(np.eye(2)[None], 0.0, np.ones(1))
    with pytest.raises(CoefficientError, match="kappa"):
        DiffusionCoeff(np.eye(2)[None], 1.0, np.zeros(1))


def test_problem_coefficient_validation():
    g = build_grid((0, 0), (1, 1), (3, 3))
    with pytest.raises(CoefficientError, match="gamma"):
        constant_coefficients(g, gamma=0.0)
    with pytest.raises(CoefficientError, match="a0"):
        constant_coefficients(g, k=(0.5, 0.0), a0=1.0)
    c = constant_coefficients(g, A=1.0, lam=1.0, kappa=1.0, M=1.0)
    # eigenvalues of A_xi lie in [1 + 1/2, 2]
    assert c.beta0 == pytest.approx(0.5)


def test_preset_zero_frequency():
    g = build_grid((0, 0), (1, 1), (3, 3))
    c = preset_biomedical(g, 1 / 6, 1 / 6, 0.0, 3e10, 1.0, 0.5, gamma=1.0, M=1.0)
    assert np.all(c.K.im == 0)
    assert np.allclose(c.H.re, 1.0) and np.allclose(c.H.im, 0.0)
    A = assemble_A_xi(c.diffusion, np.zeros(g.n_nodes))
    assert np.allclose(A, np.eye(2), atol=1e-7)


def test_preset_emission_factor():
    g = build_grid((0, 0), (1, 1), (3, 3))
    c = preset_biomedical(g, 0.1, 1.0, 1.0, 1.0, 1.0, 1.0, gamma=1.0, M=1.0)
    assert np.allclose(c.H.re, 0.5) and np.allclose(c.H.im, 0.5)


@settings(max_examples=30)
@given(st.floats(0.01, 1), st.floats(0.1, 10), st.floats(0, 5), st.floats(0.1, 3),
       st.floats(0, 1), st.floats(0, 2), st.floats(0, 2))
def test_preset_matches_direct_formula(mu_a, mu_s, omega, c, phi, tau, xi):
    g = build_grid((0, 0), (1, 1), (3, 3))
    co = preset_biomedical(g, mu_a, mu_s, omega, c, phi, tau, gamma=1.0, M=2.0)
    d, k, h = biomedical_direct(mu_a, mu_s, omega, c, phi, tau, xi)
    A = assemble_A_xi(co.diffusion, np.full(g.n_nodes, xi))
    assert np.allclose(A, d * np.eye(2), atol=2e-8)
    assert np.allclose(co.K.re + xi, k.real) and np.allclose(co.K.im, k.imag)
    assert np.allclose(co.H.re, h.real) and np.allclose(co.H.im, h.imag)
