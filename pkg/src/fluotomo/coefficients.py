"""PDE coefficients of the coupled excitation/emission Robin system.

Complex coefficients (``k`` and ``h``) are stored as real and imaginary nodal
parts and act on R^2 fields through the rotation form ``[[re, -im], [im, re]]``.
The parameter-dependent diffusion is ``A_xi = A + r(x, xi) I`` with
``r(x, t) = lam / (kappa(x) + t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Grid


class CoefficientError(ValueError):
    pass


def rotation(re, im) -> np.ndarray:
    """2x2 rotation-form matrices ``[[re, -im], [im, re]]`` (broadcasting)."""
    re, im = np.broadcast_arrays(np.asarray(re, dtype=float), np.asarray(im, dtype=float))
    out = np.empty(re.shape + (2, 2))
    out[..., 0, 0] = re
    out[..., 0, 1] = -im
    out[..., 1, 0] = im
    out[..., 1, 1] = re
    return out


@dataclass(frozen=True, eq=False)
class ComplexCoeff:
    re: np.ndarray
    im: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return rotation(self.re, self.im)

    def apply(self, w: np.ndarray) -> np.ndarray:
        """Multiply an R^2 field by the coefficient (complex multiplication)."""
        w = np.asarray(w, dtype=float)
        return np.stack([self.re * w[..., 0] - self.im * w[..., 1],
                         self.im * w[..., 0] + self.re * w[..., 1]], axis=-1)


@dataclass(frozen=True, eq=False)
class DiffusionCoeff:
    A: np.ndarray          # (n_nodes, n, n), symmetric, nonnegative
    lam: float
    kappa: np.ndarray      # (n_nodes,), positive

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise CoefficientError("A must be a matrix field (n_nodes, n, n)")
        if not np.allclose(A, np.swapaxes(A, 1, 2), atol=1e-14):
            raise CoefficientError("A must be symmetric at every node")
        if np.linalg.eigvalsh(A).min() < -1e-14:
            raise CoefficientError("A must be positive semidefinite")
        if not self.lam > 0:
            raise CoefficientError("lambda must be positive")
        kappa = np.asarray(self.kappa, dtype=float)
        if kappa.shape != A.shape[:1] or not np.all(kappa > 0):
            raise CoefficientError("kappa must be a positive scalar field")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "lam", float(self.lam))


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise CoefficientError("negative t in r(x, t)")
    return t


def eval_r(diffusion: DiffusionCoeff, t, node=None):
    """``lam / (kappa + t)`` at one node, or at all nodes when ``node`` is None."""
    kappa = diffusion.kappa if node is None else diffusion.kappa[node]
    return diffusion.lam / (kappa + _check_t(t))


def eval_r_dot(diffusion: DiffusionCoeff, t, node=None):
    """Partial derivative of ``r`` with respect to ``t``."""
    kappa = diffusion.kappa if node is None else diffusion.kappa[node]
    return -diffusion.lam / (kappa + _check_t(t)) ** 2


def assemble_A_xi(diffusion: DiffusionCoeff, xi: np.ndarray, M: float | None = None) -> np.ndarray:
    """Nodal ``A + r(x, xi(x)) I``."""
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0) or (M is not None and np.any(xi > M)):
        raise CoefficientError("xi out of the admissible box")
    n = diffusion.A.shape[1]
    return diffusion.A + eval_r(diffusion, xi)[:, None, None] * np.eye(n)


def assemble_K_xi(K: ComplexCoeff, xi: np.ndarray) -> np.ndarray:
    """Nodal ``K + xi I_2``."""
    xi = np.asarray(xi, dtype=float)
    if np.any(xi < 0):
        raise CoefficientError("xi must be nonnegative")
    return rotation(K.re + xi, K.im)


@dataclass(frozen=True, eq=False)
class ProblemCoefficients:
    grid: Grid
    diffusion: DiffusionCoeff
    K: ComplexCoeff
    H: ComplexCoeff
    gamma: float
    M: float
    a0: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        N = self.grid.n_nodes
        if self.diffusion.A.shape[0] != N:
            raise CoefficientError("coefficient fields do not match the grid")
        for c in (self.K, self.H):
            for part in (c.re, c.im):
                if np.shape(part) != (N,) or not np.all(np.isfinite(part)):
                    raise CoefficientError("complex coefficient parts must be finite scalar fields")
        if not self.gamma > 0:
            raise CoefficientError("gamma must be positive")
        if not self.M > 0:
            raise CoefficientError("M must be positive")
        a0 = self.a0
        if a0 is None:
            a0 = float(min(self.K.re.min(), self.diffusion.kappa.min()))
        if not a0 > 0:
            raise CoefficientError("k_R and kappa must be bounded below by a0 > 0")
        if self.K.re.min() < a0 - 1e-14 or self.diffusion.kappa.min() < a0 - 1e-14:
            raise CoefficientError(f"k_R and kappa must be >= a0 = {a0}")
        object.__setattr__(self, "a0", float(a0))

    @property
    def beta0(self) -> float:
        """Ellipticity constant valid for every admissible xi in [0, M].

        Eigenvalues of ``A_xi`` lie in ``[beta0, 1/beta0]`` and ``k_R + xi >= beta0``.
        """
        eig = np.linalg.eigvalsh(self.diffusion.A)
        lam, kappa = self.diffusion.lam, self.diffusion.kappa
        lo = float((eig[:, 0] + lam / (kappa + self.M)).min())
        hi = float((eig[:, -1] + lam / kappa).max())
        return min(lo, 1.0 / hi, self.a0)


def constant_coefficients(grid: Grid, *, A=1.0, lam=1.0, kappa=1.0, k=(1.0, 0.0),
                          h=(1.0, 0.0), gamma=1.0, M=1.0, a0=None) -> ProblemCoefficients:
    """Spatially constant coefficients (``A`` a scalar times identity or a matrix)."""
    N, n = grid.n_nodes, grid.dim
    A = np.asarray(A, dtype=float)
    Amat = A * np.eye(n) if A.ndim == 0 else A
    ones = np.ones(N)
    return ProblemCoefficients(
        grid=grid,
        diffusion=DiffusionCoeff(np.broadcast_to(Amat, (N, n, n)).copy(), lam, kappa * ones),
        K=ComplexCoeff(k[0] * ones, k[1] * ones),
        H=ComplexCoeff(h[0] * ones, h[1] * ones),
        gamma=gamma, M=M, a0=a0,
    )


PRESET_EPS = 1e-8


def biomedical_direct(mu_a, mu_s, omega, c, phi_q, tau, xi):
    """Evaluate the imaging-preset coefficients directly from the optical parameters.

    Returns ``(d, k, h)`` with ``A_xi = d * I``, and ``k``, ``h`` complex arrays.
    """
    mu_a, mu_s, tau, xi = (np.asarray(v, dtype=float) for v in (mu_a, mu_s, tau, xi))
    d = 1.0 / (3.0 * (mu_a + mu_s + xi))
    k = mu_a + xi + 1j * omega / c
    h = phi_q / (1.0 - 1j * omega * tau)
    return d, k, h


def preset_biomedical(grid: Grid, mu_a, mu_s, omega: float, c: float, phi_q: float, tau,
                      *, gamma: float, M: float) -> ProblemCoefficients:
    """Map the optical-imaging parameters onto the generic coefficient form.

    ``A = eps I`` (``eps = 1e-8``), ``lam = 1/3`` and ``kappa = mu_a + mu_s`` so
    that ``A + lam/(kappa + xi)`` reproduces ``(3 (mu_a + mu_s + xi))^-1`` up to
    the floor; ``k = mu_a + i omega/c`` and ``h = phi_q / (1 - i omega tau)``.
    """
    N = grid.n_nodes
    mu_a = np.broadcast_to(np.asarray(mu_a, dtype=float), (N,)).copy()
    mu_s = np.broadcast_to(np.asarray(mu_s, dtype=float), (N,)).copy()
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (N,)).copy()
    if np.any(mu_a <= 0) or np.any(mu_s <= 0) or c <= 0:
        raise CoefficientError("optical parameters mu_a, mu_s and c must be positive")
    if omega < 0 or np.any(tau < 0) or not 0 <= phi_q <= 1:
        raise CoefficientError("need omega >= 0, tau >= 0 and 0 <= phi_q <= 1")
    n = grid.dim
    denom = 1.0 + (omega * tau) ** 2
    return ProblemCoefficients(
        grid=grid,
        diffusion=DiffusionCoeff(np.broadcast_to(PRESET_EPS * np.eye(n), (N, n, n)).copy(),
                                 1.0 / 3.0, mu_a + mu_s),
        K=ComplexCoeff(mu_a, np.full(N, omega / c)),
        H=ComplexCoeff(phi_q / denom, phi_q * omega * tau / denom),
        gamma=gamma, M=M,
        meta={"preset": "biomedical"},
    )
