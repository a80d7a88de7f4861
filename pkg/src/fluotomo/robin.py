"""Galerkin Q1 assembly and solution of Robin systems with 2x2 reaction blocks.

Unknowns are interleaved per node: ``2 * k + j`` is component ``j`` (0 real,
1 imaginary) of node ``k``.  Rows of an assembled operator correspond to test
functions and columns to trial functions, so ``w @ A @ u`` is the bilinear
form ``B[u, w]``.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import ProblemCoefficients, rotation
from .grid import BoundarySet, Grid, boundary_subset, l2_norm

log = logging.getLogger("fluotomo.solve")

DIRECT_LIMIT = 20_000
DEFAULT_TOL = 1e-10


class AssemblyError(ValueError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class LinearSolveReport:
    iterations: int
    relative_residual: float
    method: str            # "iterative" or "direct"
    wall_time: float
    fallback: bool = False


class BlockOperator:
    """Assembled sparse operator on R^2-valued nodal fields (2x2 nodal blocks)."""

    def __init__(self, grid: Grid, matrix: sp.csr_matrix):
        self.grid = grid
        self.matrix = matrix.tocsr()

    @property
    def n_unknowns(self) -> int:
        return self.matrix.shape[0]

    @property
    def T(self) -> "BlockOperator":
        """Transposed operator (``K^T``/``H^T`` reaction blocks)."""
        return BlockOperator(self.grid, self.matrix.T.tocsr())

    def blocks(self) -> sp.bsr_matrix:
        return self.matrix.tobsr(blocksize=(2, 2))

    def apply(self, u: np.ndarray, transpose: bool = False) -> np.ndarray:
        x = np.asarray(u, dtype=float).reshape(-1)
        y = self.matrix.T @ x if transpose else self.matrix @ x
        return y.reshape(-1, 2)

    def form(self, u: np.ndarray, w: np.ndarray) -> float:
        """Bilinear form ``B[u, w]`` (trial ``u``, test ``w``)."""
        return float(np.asarray(w).reshape(-1) @ (self.matrix @ np.asarray(u).reshape(-1)))

    @cached_property
    def lu(self):
        return spla.splu(self.matrix.tocsc())

    @cached_property
    def block_jacobi(self) -> spla.LinearOperator:
        d = self.matrix.diagonal()
        n = len(d) // 2
        idx = 2 * np.arange(n)
        a, dd = d[idx], d[idx + 1]
        b = np.asarray(self.matrix[idx, idx + 1]).ravel()
        c = np.asarray(self.matrix[idx + 1, idx]).ravel()
        det = a * dd - b * c
        inv = np.stack([dd, -b, -c, a], axis=-1).reshape(n, 2, 2) / det[:, None, None]

        def mv(x):
            return np.einsum("kij,kj->ki", inv, np.asarray(x).reshape(n, 2)).ravel()

        return spla.LinearOperator(self.matrix.shape, matvec=mv, dtype=float)


# -- assembly --------------------------------------------------------------------


def _quad_coeff(grid: Grid, values, tail: tuple) -> np.ndarray:
    """Coefficient at volume Gauss points from nodal or quadrature data."""
    values = np.asarray(values, dtype=float)
    nq = len(grid.basis)
    if values.shape == tail:
        return np.broadcast_to(values, (grid.n_cells, nq) + tail)
    if values.shape == (grid.n_nodes,) + tail:
        return grid.at_quad(values)
    if values.shape == (grid.n_cells, nq) + tail:
        return values
    raise AssemblyError(f"coefficient of shape {values.shape} does not match the grid")


def _pattern(grid: Grid, face_ids: tuple):
    cache = grid.__dict__.setdefault("_pattern_cache", {})
    if face_ids in cache:
        return cache[face_ids]
    cells = grid.cells
    nloc = cells.shape[1]
    i2 = np.arange(2)
    rows = (2 * cells[:, :, None, None, None] + i2[None, None, None, :, None])
    cols = (2 * cells[:, None, :, None, None] + i2[None, None, None, None, :])
    rows = np.broadcast_to(rows, (len(cells), nloc, nloc, 2, 2)).ravel()
    cols = np.broadcast_to(cols, (len(cells), nloc, nloc, 2, 2)).ravel()
    faces = grid.face_nodes[np.asarray(face_ids, dtype=np.int64)]
    if len(faces):
        nfn = faces.shape[1]
        fr = 2 * faces[:, :, None, None] + i2[None, None, None, :]
        fc = 2 * faces[:, None, :, None] + i2[None, None, None, :]
        rows = np.concatenate([rows, np.broadcast_to(fr, (len(faces), nfn, nfn, 2)).ravel()])
        cols = np.concatenate([cols, np.broadcast_to(fc, (len(faces), nfn, nfn, 2)).ravel()])
    n2 = 2 * grid.n_nodes
    keys, inverse = np.unique(rows.astype(np.int64) * n2 + cols, return_inverse=True)
    indptr = np.searchsorted(keys // n2, np.arange(n2 + 1))
    out = (inverse, keys % n2, indptr, len(keys))
    cache[face_ids] = out
    return out


def _assemble(grid: Grid, Bq, Lq, gamma: float, face_ids: tuple) -> BlockOperator:
    dN, N, w = grid.basis_grad, grid.basis, grid.quad_weight
    stiff = np.einsum("cqde,qbd,qae->cab", Bq, dN, dN) * w
    react = np.einsum("qa,qb,cqij->cabij", N, N, Lq) * w
    local = react
    local[..., 0, 0] += stiff
    local[..., 1, 1] += stiff
    data = [local.ravel()]
    if len(face_ids):
        Nf = grid.face_basis
        areas = grid.face_area[np.asarray(face_ids, dtype=np.int64)]
        fmass = np.einsum("qa,qb->ab", Nf, Nf) / Nf.shape[0]
        fl = gamma * areas[:, None, None, None] * fmass[None, :, :, None]
        data.append(np.broadcast_to(fl, fl.shape[:3] + (2,)).ravel())
    inverse, indices, indptr, nnz = _pattern(grid, tuple(face_ids))
    vals = np.bincount(inverse, weights=np.concatenate(data), minlength=nnz)
    n2 = 2 * grid.n_nodes
    return BlockOperator(grid, sp.csr_matrix((vals, indices, indptr), shape=(n2, n2)))


def assemble_system(grid: Grid, B, L, gamma: float, robin: BoundarySet | None = None,
                    check: bool = True) -> BlockOperator:
    """Assemble ``int B:(Du^T Dpsi) + (L u).psi + int_dOmega gamma u.psi``.

    ``B`` is a matrix field and ``L`` a 2x2 field, each either nodal (Q1
    interpolated) or already sampled at the volume Gauss points.
    """
    n = grid.dim
    Bq = _quad_coeff(grid, B, (n, n))
    Lq = _quad_coeff(grid, L, (2, 2))
    if robin is None:
        robin = boundary_subset(grid, "all")
    if check:
        if not np.allclose(Bq, np.swapaxes(Bq, -1, -2)) or np.linalg.eigvalsh(Bq).min() <= 0:
            raise AssemblyError("diffusion matrix B must be symmetric positive definite")
        if robin.n_faces != len(grid.face_axis):
            raise AssemblyError("Robin boundary set must cover the whole boundary")
        if not gamma > 0:
            raise AssemblyError("gamma must be positive")
    return _assemble(grid, Bq, Lq, gamma, robin.face_ids)


def assemble_rhs(grid: Grid, f=None, F=None, g=None, gamma_set: BoundarySet | None = None) -> np.ndarray:
    """Load vector ``int f.psi + F:Dpsi + int_Gamma g.psi`` as a ``(n_nodes, 2)`` array.

    ``f`` is nodal ``(n_nodes, 2)`` or at Gauss points, ``F`` nodal
    ``(n_nodes, 2, n)`` or at Gauss points; ``g`` is nodal ``(n_nodes, 2)`` or
    a callable ``g(points, normals) -> (k, 2)`` integrated over ``gamma_set``
    (default: whole boundary).
    """
    out = np.zeros((grid.n_nodes, 2))
    if f is not None:
        out += grid.scatter_quad(_quad_coeff(grid, f, (2,)))
    if F is not None:
        out += grid.scatter_quad_grad(_quad_coeff(grid, F, (2, grid.dim)))
    if g is not None:
        if gamma_set is None:
            gamma_set = boundary_subset(grid, "all")
        out += boundary_load(g, gamma_set)
    return out


def boundary_load(g, gamma_set: BoundarySet) -> np.ndarray:
    """Nodal load ``int_Gamma g . N_k dH`` (face Gauss quadrature)."""
    grid = gamma_set.grid
    Nf = grid.face_basis
    if callable(g):
        pts = grid.face_quad_points(gamma_set.ids)
        nrm = np.broadcast_to(gamma_set.normals[:, None, :], pts.shape)
        gq = np.asarray(g(pts.reshape(-1, grid.dim), nrm.reshape(-1, grid.dim)), dtype=float)
        gq = gq.reshape(pts.shape[:2] + (2,))
    else:
        g = np.asarray(g, dtype=float)
        gq = np.einsum("qa,faj->fqj", Nf, g[gamma_set.faces])
    wts = gamma_set.areas / Nf.shape[0]
    local = np.einsum("f,qa,fqj->faj", wts, Nf, gq)
    out = np.zeros((grid.n_nodes, 2))
    for j in range(2):
        out[:, j] = np.bincount(gamma_set.faces.ravel(), weights=local[..., j].ravel(),
                                minlength=grid.n_nodes)
    return out


# -- linear solves ---------------------------------------------------------------


def solve_linear(op: BlockOperator, rhs, tol: float = DEFAULT_TOL, transpose: bool = False,
                 method: str = "auto", restart: int = 60, maxiter: int = 200):
    """Solve ``op u = rhs`` (or the transposed system).

    Direct sparse LU is used when ``method="direct"`` or, for ``"auto"``, when
    the system has at most 20,000 unknowns.  Otherwise restarted GMRES with a
    2x2 block-Jacobi preconditioner runs first and falls back to LU when it
    stagnates above ``tol``.
    """
    if not 0 < tol <= 1e-4:
        raise ValueError("solver tolerance must lie in (0, 1e-4]")
    b = np.asarray(rhs, dtype=float).reshape(-1)
    A = op.matrix.T if transpose else op.matrix
    bnorm = np.linalg.norm(b)
    t0 = time.perf_counter()
    if bnorm == 0.0:
        rep = LinearSolveReport(0, 0.0, "direct", 0.0)
        return np.zeros((op.grid.n_nodes, 2)), rep

    def resid(x):
        return float(np.linalg.norm(A @ x - b) / bnorm)

    use_direct = method == "direct" or (method == "auto" and op.n_unknowns <= DIRECT_LIMIT)
    fallback = False
    if not use_direct:
        its = [0]

        def count(_):
            its[0] += 1

        prec = op.T.block_jacobi if transpose else op.block_jacobi
        x, _ = spla.gmres(A, b, rtol=tol * 0.5, atol=0.0, restart=restart, maxiter=maxiter,
                          M=prec, callback=count, callback_type="pr_norm")
        res = resid(x)
        if res <= tol:
            rep = LinearSolveReport(its[0], res, "iterative", time.perf_counter() - t0)
            return x.reshape(-1, 2), rep
        log.debug("gmres stagnated at res=%.3e after %d iterations; using LU", res, its[0])
        fallback = True
    x = op.lu.solve(b, trans="T" if transpose else "N")
    res = resid(x)
    rep = LinearSolveReport(1, res, "direct", time.perf_counter() - t0, fallback)
    if not np.all(np.isfinite(x)) or res > tol:
        raise SolverError(f"linear solve failed: relative residual {res:.3e} > {tol:.1e}", rep)
    return x.reshape(-1, 2), rep


# -- the fluorescence forward problem ----------------------------------------------


def fot_quad_coefficients(coeffs: ProblemCoefficients, xi: np.ndarray):
    """``A_xi``, ``K_xi``, ``r_dot`` and interpolated ``xi`` at volume Gauss points.

    ``kappa`` and ``xi`` are interpolated and ``r`` is evaluated pointwise.
    """
    grid = coeffs.grid
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (grid.n_nodes,):
        raise AssemblyError("xi does not match the grid")
    if np.any(xi < 0) or np.any(xi > coeffs.M):
        raise AssemblyError("xi out of the admissible box [0, M]")
    d = coeffs.diffusion
    xq = grid.at_quad(xi)
    kq = grid.at_quad(d.kappa)
    r = d.lam / (kq + xq)
    rdot = -d.lam / (kq + xq) ** 2
    Aq = grid.at_quad(d.A) + r[..., None, None] * np.eye(grid.dim)
    Kq = rotation(grid.at_quad(coeffs.K.re) + xq, grid.at_quad(coeffs.K.im))
    return Aq, Kq, rdot, xq


def fot_operator(coeffs: ProblemCoefficients, xi: np.ndarray) -> BlockOperator:
    Aq, Kq, _, _ = fot_quad_coefficients(coeffs, xi)
    grid = coeffs.grid
    return _assemble(grid, Aq, Kq, coeffs.gamma, tuple(range(len(grid.face_axis))))


def h_at_quad(coeffs: ProblemCoefficients) -> np.ndarray:
    g = coeffs.grid
    return rotation(g.at_quad(coeffs.H.re), g.at_quad(coeffs.H.im))


def emission_load(coeffs: ProblemCoefficients, xi: np.ndarray, u: np.ndarray,
                  transpose: bool = False) -> np.ndarray:
    """Nodal load of ``int xi (H u).psi`` (``H^T`` when ``transpose``)."""
    grid = coeffs.grid
    Hq = h_at_quad(coeffs)
    if transpose:
        Hq = np.swapaxes(Hq, -1, -2)
    xq = grid.at_quad(np.asarray(xi, dtype=float))
    uq = grid.at_quad(np.asarray(u, dtype=float))
    return grid.scatter_quad(xq[..., None] * np.einsum("cqij,cqj->cqi", Hq, uq))


@dataclass
class Source:
    """Interior source ``S`` (nodal) and boundary source ``s`` on ``s_set``."""

    S: np.ndarray | None = None
    s: object = None
    s_set: BoundarySet | None = None


def excitation_load(coeffs: ProblemCoefficients, source: Source) -> np.ndarray:
    grid = coeffs.grid
    out = np.zeros((grid.n_nodes, 2))
    if source.S is not None:
        out += grid.scatter_quad(grid.at_quad(np.asarray(source.S, dtype=float)))
    if source.s is not None:
        s_set = source.s_set if source.s_set is not None else boundary_subset(grid, "all")
        out += boundary_load(source.s, s_set)
    return out


def solve_excitation(coeffs, xi, S, s=None, s_set=None, op=None, tol=DEFAULT_TOL,
                     return_report=False):
    """Excitation fluence ``u`` for interior source ``S`` and boundary source ``s``."""
    if op is None:
        op = fot_operator(coeffs, xi)
    u, rep = solve_linear(op, excitation_load(coeffs, Source(S, s, s_set)), tol)
    return (u, rep) if return_report else u


def solve_emission(coeffs, xi, u, op=None, tol=DEFAULT_TOL, return_report=False):
    """Emission fluence ``v`` driven by ``xi H u`` with homogeneous Robin data."""
    if op is None:
        op = fot_operator(coeffs, xi)
    v, rep = solve_linear(op, emission_load(coeffs, xi, u), tol)
    return (v, rep) if return_report else v


@dataclass
class ForwardState:
    xi: np.ndarray
    op: BlockOperator
    u: list
    v: list
    traces: list
    gammas: list
    reports: list = field(default_factory=list)


def forward(coeffs: ProblemCoefficients, xi: np.ndarray, sources: list, gammas: list,
            tol: float = DEFAULT_TOL, threads: int = 1, op: BlockOperator | None = None) -> ForwardState:
    """Solve excitation then emission for every source; extract traces on ``gammas``."""
    if not sources:
        raise ValueError("need at least one source")
    if len(gammas) != len(sources):
        raise ValueError("one measurement set per source is required")
    xi = np.asarray(xi, dtype=float)
    if op is None:
        op = fot_operator(coeffs, xi)

    def one(i):
        src = sources[i]
        try:
            u, ru = solve_linear(op, excitation_load(coeffs, src), tol)
            v, rv = solve_linear(op, emission_load(coeffs, xi, u), tol)
        except SolverError as exc:
            raise SolverError(f"source {i}: {exc}", exc.report) from exc
        log.info("solve: i=%d iters=%d res=%.3e", i, ru.iterations, ru.relative_residual)
        log.info("solve: i=%d iters=%d res=%.3e", i, rv.iterations, rv.relative_residual)
        return u, v, (ru, rv)

    idx = range(len(sources))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, idx))
    else:
        results = [one(i) for i in idx]
    us = [r[0] for r in results]
    vs = [r[1] for r in results]
    traces = [v[g.nodes] for v, g in zip(vs, gammas)]
    reports = [r[2] for r in results]
    return ForwardState(xi, op, us, vs, traces, list(gammas), reports)


def emission_stability_ratio(coeffs: ProblemCoefficients, xi, u, v) -> float:
    """``||v|| / (||xi||_inf ||u||)`` with discrete L2 norms (a-priori-estimate diagnostic)."""
    xmax = float(np.max(np.abs(xi)))
    un = l2_norm(coeffs.grid, u)
    if xmax == 0.0 or un == 0.0:
        return 0.0
    return l2_norm(coeffs.grid, v) / (xmax * un)
