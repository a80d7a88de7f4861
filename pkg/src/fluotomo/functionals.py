"""Regularised L^p / L^inf misfit functionals, Hessian Tikhonov term and duality densities.

All boundary and volume integrals of nodal quantities use the Gauss rule of
the multilinear interpolant, which for nodal data reduces to the tensor
trapezoid weights ``Gamma.node_weights`` and ``grid.node_weights``.  The
"quadrature nodes" of a measurement set are its grid nodes, so boundary
maxima and measure densities are nodal.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .grid import BoundarySet, Grid, discrete_hessian, hessian_transpose


@dataclass
class MeasurementData:
    gammas: list            # BoundarySet per source
    traces: list            # (len(gamma.nodes), 2) arrays
    delta: float = 0.0

    def __post_init__(self):
        if len(self.gammas) != len(self.traces):
            raise ValueError("need one trace per measurement set")
        for g, t in zip(self.gammas, self.traces):
            if np.shape(t) != (len(g.nodes), 2) or not np.all(np.isfinite(t)):
                raise ValueError("trace does not match its measurement set")

    @property
    def N(self) -> int:
        return len(self.gammas)


@dataclass(frozen=True)
class EnergyParams:
    p: float
    m: float
    alpha: float
    M: float
    dim: int = 2

    def __post_init__(self):
        if not self.p >= 2:
            raise ValueError(f"p must be >= 2 (got {self.p})")
        if not self.m > 1:
            raise ValueError(f"m must be > 1 (got {self.m})")
        if not self.alpha > 0 or not self.M > 0:
            raise ValueError("alpha and M must be positive")
        n = self.dim
        if not self.m > n:
            warnings.warn(f"m = {self.m} does not satisfy m > n = {n}", stacklevel=2)
        threshold = n if n <= 2 else max(n, 2 * n / (n - 2))
        if math.isfinite(self.p) and not self.p > threshold:
            warnings.warn(f"p = {self.p} is below the threshold {threshold:g} for n = {n}",
                          stacklevel=2)


def reg_abs(w, p: float):
    """``sqrt(|w|^2 + p^-2)`` over the last axis (plain norm when ``p`` is infinite)."""
    if not p >= 2:
        raise ValueError("p must be >= 2")
    w = np.asarray(w, dtype=float)
    sq = np.sum(w * w, axis=-1)
    return np.sqrt(sq) if math.isinf(p) else np.sqrt(sq + p**-2.0)


def _averaged_power_norm(a: np.ndarray, weights: np.ndarray, p: float) -> float:
    """``(sum w a^p / sum w)^(1/p)`` for ``a > 0``, scaled to avoid under/overflow."""
    amax = a.max()
    return float(amax * (np.dot(weights, (a / amax) ** p) / weights.sum()) ** (1.0 / p))


def _frobenius_flat(V: np.ndarray, n_nodes: int) -> np.ndarray:
    return np.asarray(V, dtype=float).reshape(n_nodes, -1)


def dotted_norm_boundary(g: np.ndarray, gamma: BoundarySet, p: float) -> float:
    """Averaged regularised ``L^p(Gamma)`` norm of a trace on ``gamma.nodes``."""
    if gamma.n_faces == 0:
        raise ValueError("empty boundary set")
    return _averaged_power_norm(reg_abs(g, p), gamma.node_weights, p)


def dotted_norm_volume(grid: Grid, V: np.ndarray, m: float) -> float:
    """Averaged regularised ``L^m(Omega)`` norm of a nodal (matrix) field."""
    return _averaged_power_norm(reg_abs(_frobenius_flat(V, grid.n_nodes), m),
                                grid.node_weights, m)


def mu_field(grid: Grid, V: np.ndarray, m: float) -> np.ndarray:
    """Duality density of the Tikhonov norm: ``d/dV ||V|| . W = int W : mu``."""
    V = np.asarray(V, dtype=float)
    flat = _frobenius_flat(V, grid.n_nodes)
    a = reg_abs(flat, m)
    norm = dotted_norm_volume(grid, V, m)
    scale = (a / norm) ** (m - 2) / (grid.node_weights.sum() * norm)
    return (scale[:, None] * flat).reshape(V.shape)


@dataclass
class BoundaryMeasure:
    """R^2-valued densities on each measurement set (w.r.t. surface measure)."""

    gammas: list
    densities: list

    def pair(self, traces: list) -> float:
        """``sum_i int_{Gamma_i} w_i . d nu_i``."""
        return float(sum(np.sum(g.node_weights[:, None] * d * np.asarray(w))
                         for g, d, w in zip(self.gammas, self.densities, traces)))

    def loads(self) -> list:
        """Nodal loads ``int_{Gamma_i} N_k nu_i`` on each set's nodes."""
        return [g.node_weights[:, None] * d for g, d in zip(self.gammas, self.densities)]


def nu_measure(traces: list, data: MeasurementData, p: float) -> BoundaryMeasure:
    dens = []
    for g, v, vd in zip(data.gammas, traces, data.traces):
        r = np.asarray(v, dtype=float) - vd
        a = reg_abs(r, p)
        norm = dotted_norm_boundary(r, g, p)
        scale = (a / norm) ** (p - 2) / (g.measure * norm)
        dens.append(scale[:, None] * r)
    return BoundaryMeasure(list(data.gammas), dens)


def total_variation(nu: BoundaryMeasure) -> float:
    return float(sum(np.dot(g.node_weights, np.linalg.norm(d, axis=1))
                     for g, d in zip(nu.gammas, nu.densities)))


@dataclass
class EnergyTerms:
    misfit: list = field(default_factory=list)
    tikhonov: float = 0.0

    @property
    def total(self) -> float:
        return float(sum(self.misfit) + self.tikhonov)


def _check_n(traces, data):
    if len(traces) != data.N:
        raise ValueError(f"expected {data.N} traces, got {len(traces)}")


def tikhonov_term(grid: Grid, xi: np.ndarray, params: EnergyParams) -> float:
    return params.alpha * dotted_norm_volume(grid, discrete_hessian(grid, xi), params.m)


def energy_p_terms(traces, xi, data: MeasurementData, params: EnergyParams, grid: Grid) -> EnergyTerms:
    _check_n(traces, data)
    mis = [dotted_norm_boundary(np.asarray(v) - vd, g, params.p)
           for v, vd, g in zip(traces, data.traces, data.gammas)]
    return EnergyTerms(mis, tikhonov_term(grid, xi, params))


def energy_inf_terms(traces, xi, data: MeasurementData, params: EnergyParams, grid: Grid) -> EnergyTerms:
    _check_n(traces, data)
    mis = [float(np.max(np.linalg.norm(np.asarray(v) - vd, axis=1)))
           for v, vd in zip(traces, data.traces)]
    return EnergyTerms(mis, tikhonov_term(grid, xi, params))


def energy_p(traces, xi, data, params, grid) -> float:
    return energy_p_terms(traces, xi, data, params, grid).total


def energy_inf(traces, xi, data, params, grid) -> float:
    return energy_inf_terms(traces, xi, data, params, grid).total


def tikhonov_gradient(grid: Grid, xi: np.ndarray, params: EnergyParams) -> np.ndarray:
    """Nodal gradient of ``alpha ||D^2 xi||`` (transpose Hessian applied to weighted ``mu``)."""
    mu = mu_field(grid, discrete_hessian(grid, xi), params.m)
    return params.alpha * hessian_transpose(grid, grid.node_weights[:, None, None] * mu)
