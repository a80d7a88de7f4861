"""Synthetic fluorophore phantoms, light-source presets and noisy boundary data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coefficients import ProblemCoefficients
from .functionals import MeasurementData
from .grid import Grid, boundary_subset, build_grid
from .robin import DEFAULT_TOL, Source, forward

SMOOTHNESS = ("gaussian", "smoothstep")


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Blob:
    center: tuple
    radius: float
    amplitude: float


@dataclass(frozen=True)
class PhantomSpec:
    blobs: tuple = ()
    background: float = 0.0
    smoothness: str = "gaussian"

    def __post_init__(self):
        if self.smoothness not in SMOOTHNESS:
            raise PhantomError(f"unknown smoothness {self.smoothness!r}")
        if self.background < 0:
            raise PhantomError("background must be nonnegative")
        for b in self.blobs:
            if not b.radius > 0:
                raise PhantomError("blob radius must be positive")
            if b.amplitude < 0:
                raise PhantomError("blob amplitude must be nonnegative")


def _profile(dist: np.ndarray, radius: float, kind: str) -> np.ndarray:
    t = dist / radius
    if kind == "gaussian":
        return np.exp(-0.5 * t**2)
    s = np.clip(1.0 - t, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def make_phantom(grid: Grid, spec: PhantomSpec, M: float) -> np.ndarray:
    """Nodal phantom: pointwise max of background and blobs, clamped to ``[0, M]``."""
    if spec.background > M or any(b.amplitude > M for b in spec.blobs):
        raise PhantomError(f"phantom amplitude exceeds M = {M}")
    xi = np.full(grid.n_nodes, float(spec.background))
    x = grid.coords
    for b in spec.blobs:
        c = np.asarray(b.center, dtype=float)
        if c.shape != (grid.dim,):
            raise PhantomError("blob center has the wrong dimension")
        dist = np.linalg.norm(x - c, axis=1)
        xi = np.maximum(xi, b.amplitude * _profile(dist, b.radius, spec.smoothness))
    return np.clip(xi, 0.0, M)


@dataclass(frozen=True)
class SourceSpec:
    """One excitation source and its measurement set.

    ``interior`` is ``(center, width, amplitude)`` for a Gaussian bump and
    ``boundary`` is ``(selector, amplitude)`` for a constant boundary source;
    amplitudes are R^2 pairs.
    """

    interior: tuple | None = None
    boundary: tuple | None = None
    measure: str = "all"

    def __post_init__(self):
        if self.interior is None and self.boundary is None:
            raise PhantomError("a source needs an interior or a boundary part")
        amps = []
        if self.interior is not None:
            amps.append(self.interior[2])
        if self.boundary is not None:
            amps.append(self.boundary[1])
        if not any(np.any(np.asarray(a, dtype=float) != 0) for a in amps):
            raise PhantomError("source amplitude is zero")

    def build(self, grid: Grid) -> Source:
        S = s = s_set = None
        if self.interior is not None:
            center, width, amp = self.interior
            d2 = np.sum((grid.coords - np.asarray(center, dtype=float)) ** 2, axis=1)
            S = np.exp(-0.5 * d2 / width**2)[:, None] * np.asarray(amp, dtype=float)
        if self.boundary is not None:
            selector, amp = self.boundary
            s_set = boundary_subset(grid, selector)
            amp = np.asarray(amp, dtype=float)
            s = np.zeros((grid.n_nodes, 2))
            s[s_set.nodes] = amp
        return Source(S, s, s_set)


def build_sources(grid: Grid, specs: list):
    sources = [sp.build(grid) for sp in specs]
    gammas = [boundary_subset(grid, sp.measure) for sp in specs]
    return sources, gammas


def refine(grid: Grid) -> Grid:
    """Same box with every cell split in two along each axis."""
    return build_grid(grid.lo, grid.hi, tuple(2 * c - 1 for c in grid.counts))


def coarse_to_fine_nodes(coarse: Grid, fine: Grid, nodes: np.ndarray) -> np.ndarray:
    return fine.flat_index(2 * coarse.multi_index(nodes))


def noise_streams(seed: int, n: int) -> list:
    """Independent counter-based generators, one per source."""
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class SyntheticData:
    data: MeasurementData
    exact: list
    sources: list
    noise_std: float
    meta: dict = field(default_factory=dict)


def synth_data(coeffs: ProblemCoefficients, xi_true, specs: list, delta: float, seed: int,
               fine: tuple | None = None, tol: float = DEFAULT_TOL, threads: int = 1) -> SyntheticData:
    """Boundary data for ``xi_true`` with additive Gaussian noise of level ``delta``.

    The noise standard deviation is ``delta * max_i max_Gamma_i |v_i|``.  With
    ``fine=(fine_coeffs, fine_xi)`` the forward problem runs on the refined grid
    and traces are restricted to the nodes of the reconstruction grid.
    """
    if delta < 0:
        raise ValueError("noise level must be nonnegative")
    grid = coeffs.grid
    sources, gammas = build_sources(grid, specs)
    if fine is None:
        st = forward(coeffs, xi_true, sources, gammas, tol, threads)
        exact = st.traces
    else:
        fcoeffs, fxi = fine
        fsrc, fgam = build_sources(fcoeffs.grid, specs)
        st = forward(fcoeffs, fxi, fsrc, fgam, tol, threads)
        exact = [st.v[i][coarse_to_fine_nodes(grid, fcoeffs.grid, g.nodes)]
                 for i, g in enumerate(gammas)]
    scale = max(float(np.max(np.linalg.norm(t, axis=1))) for t in exact)
    std = delta * scale
    traces = [t.copy() for t in exact]
    if std > 0:
        for t, rng in zip(traces, noise_streams(seed, len(traces))):
            t += rng.normal(0.0, std, t.shape)
    return SyntheticData(MeasurementData(gammas, traces, delta), exact, sources, std,
                         {"fine": fine is not None})
