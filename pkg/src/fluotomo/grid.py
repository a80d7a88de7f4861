"""Structured box grids, Q1 quadrature and nodal finite-difference Hessians.

Fields are plain numpy arrays indexed by flat node number:

* scalar field: shape ``(n_nodes,)``
* vec2 field (real, imaginary part): shape ``(n_nodes, 2)``
* matrix field: shape ``(n_nodes, n, n)``

Flat node numbering is row-major with axis 0 running fastest, i.e.
``flat = i0 + c0 * (i1 + c1 * i2)``.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from functools import cached_property, reduce
from pathlib import Path

import numpy as np
import scipy.sparse as sp

GAUSS_01 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


class GridError(ValueError):
    pass


def _q1_tables(dim: int):
    """Reference Q1 basis values and unit-cell gradients at tensor Gauss points.

    Returns ``(bits, N, dN)`` where ``bits[a]`` are the corner bits of local
    node ``a``, ``N[q, a]`` the basis values and ``dN[q, a, d]`` the derivative
    along reference axis ``d`` (unit cell, not yet divided by ``h``).
    """
    bits = np.array(list(itertools.product((0, 1), repeat=dim)))[:, ::-1]
    pts = np.array(list(itertools.product(GAUSS_01, repeat=dim)))[:, ::-1]
    nq, nloc = len(pts), len(bits)
    N = np.ones((nq, nloc))
    dN = np.ones((nq, nloc, dim))
    for a, b in enumerate(bits):
        for d in range(dim):
            val = pts[:, d] if b[d] else 1.0 - pts[:, d]
            der = 1.0 if b[d] else -1.0
            N[:, a] *= val
            for e in range(dim):
                dN[:, a, e] *= der if e == d else val
    return bits, N, dN


@dataclass(frozen=True)
class Grid:
    """Uniform node-centred grid on the box ``[lo, hi]`` (dimension 2 or 3)."""

    lo: tuple
    hi: tuple
    counts: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        counts = tuple(int(v) for v in self.counts)
        if not (len(lo) == len(hi) == len(counts)):
            raise GridError("dimension mismatch between lo, hi and counts")
        if len(lo) not in (2, 3):
            raise GridError(f"dimension must be 2 or 3, got {len(lo)}")
        if any(c < 3 for c in counts):
            raise GridError(f"counts too small: {counts} (need >= 3 per axis)")
        if any(not (a < b) for a, b in zip(lo, hi)) or not all(np.isfinite(lo + hi)):
            raise GridError(f"degenerate box: lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @cached_property
    def h(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / (np.array(self.counts) - 1)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.counts))

    @property
    def n_cells(self) -> int:
        return int(np.prod(np.array(self.counts) - 1))

    @cached_property
    def strides(self) -> np.ndarray:
        return np.concatenate([[1], np.cumprod(self.counts[:-1])]).astype(np.int64)

    @property
    def volume(self) -> float:
        return float(np.prod(np.array(self.hi) - np.array(self.lo)))

    @property
    def surface_area(self) -> float:
        ext = np.array(self.hi) - np.array(self.lo)
        return float(sum(2.0 * np.prod(np.delete(ext, d)) for d in range(self.dim)))

    def multi_index(self, flat) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat), self.counts, order="F"), axis=-1)

    def flat_index(self, idx) -> np.ndarray:
        return np.asarray(idx) @ self.strides

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(n_nodes, dim)``."""
        idx = self.multi_index(np.arange(self.n_nodes))
        return np.array(self.lo) + idx * self.h

    def axis_coords(self, d: int) -> np.ndarray:
        return self.lo[d] + np.arange(self.counts[d]) * self.h[d]

    def as_array(self, values: np.ndarray) -> np.ndarray:
        """Reshape a nodal array so that leading axes are the grid axes."""
        values = np.asarray(values)
        return values.reshape(tuple(self.counts) + values.shape[1:], order="F")

    # -- cells and quadrature -------------------------------------------------

    @cached_property
    def _tables(self):
        return _q1_tables(self.dim)

    @cached_property
    def cells(self) -> np.ndarray:
        """Local-to-global node map, shape ``(n_cells, 2**dim)``."""
        cell_counts = tuple(c - 1 for c in self.counts)
        j = np.stack(np.unravel_index(np.arange(self.n_cells), cell_counts, order="F"), -1)
        bits = self._tables[0]
        return (j[:, None, :] + bits[None, :, :]) @ self.strides

    @property
    def basis(self) -> np.ndarray:
        """Q1 basis values at the Gauss points of a cell, ``(nq, nloc)``."""
        return self._tables[1]

    @cached_property
    def basis_grad(self) -> np.ndarray:
        """Physical basis gradients at the Gauss points, ``(nq, nloc, dim)``."""
        return self._tables[2] / self.h

    @cached_property
    def quad_weight(self) -> float:
        """Weight of every volume Gauss point (all equal on a uniform grid)."""
        return float(np.prod(self.h)) / 2**self.dim

    def at_quad(self, values: np.ndarray) -> np.ndarray:
        """Interpolate a nodal array to the volume Gauss points.

        Returns shape ``(n_cells, nq) + values.shape[1:]``.
        """
        values = np.asarray(values)
        return np.einsum("qa,ca...->cq...", self.basis, values[self.cells])

    def grad_at_quad(self, values: np.ndarray) -> np.ndarray:
        """Gradient of the Q1 interpolant at the Gauss points.

        For a nodal array of shape ``(n_nodes,) + s`` returns
        ``(n_cells, nq) + s + (dim,)``.
        """
        values = np.asarray(values)
        return np.einsum("qad,ca...->cq...d", self.basis_grad, values[self.cells])

    def scatter_quad(self, integrand: np.ndarray) -> np.ndarray:
        """Nodal load ``int integrand * N_k`` from values at Gauss points.

        ``integrand`` has shape ``(n_cells, nq) + s``; the result has shape
        ``(n_nodes,) + s``.
        """
        integrand = np.asarray(integrand)
        local = np.einsum("qa,cq...->ca...", self.basis, integrand) * self.quad_weight
        return self._scatter_local(local)

    def scatter_quad_grad(self, flux: np.ndarray) -> np.ndarray:
        """Nodal load ``int flux . grad N_k`` from values at Gauss points.

        ``flux`` has shape ``(n_cells, nq) + s + (dim,)``; returns
        ``(n_nodes,) + s``.
        """
        flux = np.asarray(flux)
        local = np.einsum("qad,cq...d->ca...", self.basis_grad, flux) * self.quad_weight
        return self._scatter_local(local)

    def _scatter_local(self, local: np.ndarray) -> np.ndarray:
        tail = local.shape[2:]
        out = np.zeros((self.n_nodes,) + tail)
        flat = local.reshape((-1,) + tail)
        if tail:
            for j in np.ndindex(*tail):
                out[(slice(None),) + j] = np.bincount(
                    self.cells.ravel(), weights=flat[(slice(None),) + j], minlength=self.n_nodes)
        else:
            out[:] = np.bincount(self.cells.ravel(), weights=flat, minlength=self.n_nodes)
        return out

    @cached_property
    def node_weights(self) -> np.ndarray:
        """``int_Omega N_k`` for every node (tensor trapezoid weights)."""
        return self.scatter_quad(np.ones((self.n_cells, len(self.basis))))

    # -- boundary faces -------------------------------------------------------

    @cached_property
    def _face_table(self):
        nodes, axes, signs, sides = [], [], [], []
        fbits = np.array(list(itertools.product((0, 1), repeat=self.dim - 1)))[:, ::-1]
        for d in range(self.dim):
            tang = [e for e in range(self.dim) if e != d]
            fcounts = tuple(self.counts[e] - 1 for e in tang)
            nf = int(np.prod(fcounts))
            j = np.stack(np.unravel_index(np.arange(nf), fcounts, order="F"), -1)
            base = (j[:, None, :] + fbits[None, :, :]) @ self.strides[tang]
            for s, fixed in ((-1, 0), (1, self.counts[d] - 1)):
                nodes.append(base + fixed * self.strides[d])
                axes.append(np.full(nf, d))
                signs.append(np.full(nf, s))
                sides.append((f"x{d}_{'min' if s < 0 else 'max'}", fcounts))
        offsets = np.concatenate([[0], np.cumsum([len(a) for a in axes])])
        return (np.concatenate(nodes), np.concatenate(axes), np.concatenate(signs),
                sides, offsets)

    @property
    def face_nodes(self) -> np.ndarray:
        return self._face_table[0]

    @property
    def face_axis(self) -> np.ndarray:
        return self._face_table[1]

    @property
    def face_sign(self) -> np.ndarray:
        return self._face_table[2]

    @cached_property
    def face_area(self) -> np.ndarray:
        hprod = np.prod(self.h)
        return hprod / self.h[self.face_axis]

    @cached_property
    def _face_q_tables(self):
        if self.dim == 2:
            N = np.stack([1.0 - GAUSS_01, GAUSS_01], axis=1)
        else:
            _, N, _ = _q1_tables(2)
        return N

    @property
    def face_basis(self) -> np.ndarray:
        """Face Q1 basis values at face Gauss points, ``(nfq, nfn)``."""
        return self._face_q_tables

    def face_quad_points(self, face_ids: np.ndarray) -> np.ndarray:
        """Physical coordinates of face Gauss points, ``(nf, nfq, dim)``."""
        x = self.coords[self.face_nodes[face_ids]]
        return np.einsum("qa,fad->fqd", self.face_basis, x)


def build_grid(lo, hi, counts) -> Grid:
    return Grid(tuple(lo), tuple(hi), tuple(counts))


# -- boundary subsets ----------------------------------------------------------

_SIDE_RE = re.compile(r"^x(\d+)_(min|max)(?:\[(.*)\])?$")


@dataclass(frozen=True)
class BoundarySet:
    """A set of boundary faces, stored as sorted ids into the grid face table."""

    grid: Grid
    face_ids: tuple
    selector: str = ""

    @cached_property
    def ids(self) -> np.ndarray:
        return np.asarray(self.face_ids, dtype=np.int64)

    @property
    def n_faces(self) -> int:
        return len(self.face_ids)

    @cached_property
    def faces(self) -> np.ndarray:
        return self.grid.face_nodes[self.ids]

    @cached_property
    def normals(self) -> np.ndarray:
        n = np.zeros((self.n_faces, self.grid.dim))
        n[np.arange(self.n_faces), self.grid.face_axis[self.ids]] = self.grid.face_sign[self.ids]
        return n

    @cached_property
    def areas(self) -> np.ndarray:
        return self.grid.face_area[self.ids]

    @property
    def measure(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def nodes(self) -> np.ndarray:
        """Sorted unique grid nodes touched by the faces (trace support)."""
        return np.unique(self.faces)

    @cached_property
    def local_faces(self) -> np.ndarray:
        """Face connectivity in terms of positions in :attr:`nodes`."""
        return np.searchsorted(self.nodes, self.faces)

    @cached_property
    def node_weights(self) -> np.ndarray:
        """``int_Gamma N_k dH`` for each node in :attr:`nodes`."""
        nfn = self.faces.shape[1]
        w = np.zeros(len(self.nodes))
        np.add.at(w, self.local_faces.ravel(), np.repeat(self.areas / nfn, nfn))
        return w

    def __or__(self, other: "BoundarySet") -> "BoundarySet":
        if other.grid != self.grid:
            raise GridError("boundary sets live on different grids")
        ids = tuple(sorted(set(self.face_ids) | set(other.face_ids)))
        return BoundarySet(self.grid, ids, f"{self.selector}+{other.selector}")


def _parse_window(text: str, fcounts: tuple) -> list:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != len(fcounts):
        raise GridError(f"window '{text}' needs {len(fcounts)} ranges")
    ranges = []
    for part, fc in zip(parts, fcounts):
        a, _, b = part.partition(":")
        lo = int(a) if a.strip() else 0
        hi = int(b) if b.strip() else fc
        ranges.append((max(lo, 0), min(hi, fc)))
    return ranges


def boundary_subset(grid: Grid, selector: str) -> BoundarySet:
    """Select boundary faces.

    Grammar: ``all`` | ``x<d>_min`` | ``x<d>_max``, optionally followed by a
    window of face-cell index ranges along the tangential axes, e.g.
    ``x0_min[2:6]`` (2D) or ``x2_max[0:4,1:3]`` (3D).  Terms may be joined with
    ``+`` to form a union.
    """
    nodes, axes, signs, sides, offsets = grid._face_table
    ids: set = set()
    for term in selector.split("+"):
        term = term.strip()
        if term == "all":
            ids.update(range(len(axes)))
            continue
        m = _SIDE_RE.match(term)
        if m is None:
            raise GridError(f"unknown selector '{term}'")
        d, which, window = int(m.group(1)), m.group(2), m.group(3)
        if d >= grid.dim:
            raise GridError(f"unknown selector '{term}' for a {grid.dim}D grid")
        k = 2 * d + (1 if which == "max" else 0)
        fcounts = sides[k][1]
        local = np.arange(offsets[k + 1] - offsets[k])
        if window is not None:
            j = np.stack(np.unravel_index(local, fcounts, order="F"), -1)
            keep = np.ones(len(local), dtype=bool)
            for t, (a, b) in enumerate(_parse_window(window, fcounts)):
                keep &= (j[:, t] >= a) & (j[:, t] < b)
            local = local[keep]
        ids.update((local + offsets[k]).tolist())
    if not ids:
        raise GridError(f"empty selection for selector '{selector}'")
    return BoundarySet(grid, tuple(sorted(ids)), selector)


# -- quadrature ------------------------------------------------------------------


def integrate_volume(grid: Grid, f: np.ndarray) -> float:
    """2-point tensor Gauss integral of the Q1 interpolant of a nodal field."""
    f = np.asarray(f, dtype=float)
    if f.shape[0] != grid.n_nodes or not np.all(np.isfinite(f)):
        raise GridError("field does not match grid or is not finite")
    total = grid.at_quad(f).sum(axis=(0, 1)) * grid.quad_weight
    return float(total) if f.ndim == 1 else total


def integrate_surface(g, gamma: BoundarySet) -> float:
    """Face-wise 2-point Gauss integral over ``gamma``.

    ``g`` is either a nodal array over the whole grid or a callable
    ``g(points, normals)`` evaluated at face Gauss points.
    """
    if gamma.n_faces == 0:
        raise GridError("empty boundary set")
    grid = gamma.grid
    Nf = grid.face_basis
    if callable(g):
        pts = grid.face_quad_points(gamma.ids)
        nrm = np.broadcast_to(gamma.normals[:, None, :], pts.shape)
        vals = np.asarray(g(pts.reshape(-1, grid.dim), nrm.reshape(-1, grid.dim)))
        vals = vals.reshape(pts.shape[:2] + vals.shape[1:])
    else:
        g = np.asarray(g, dtype=float)
        vals = np.einsum("qa,fa...->fq...", Nf, g[gamma.faces])
    w = gamma.areas / Nf.shape[0]
    out = np.einsum("f,fq...->...", w, vals)
    return float(out) if np.ndim(out) == 0 else out


def l2_norm(grid: Grid, values: np.ndarray) -> float:
    """L2 norm of the Q1 interpolant (Gauss quadrature, consistent mass)."""
    q = grid.at_quad(values)
    sq = q**2
    return float(np.sqrt(sq.sum() * grid.quad_weight))


# -- discrete Hessian ------------------------------------------------------------


def _d2_1d(c: int, h: float) -> sp.csr_matrix:
    D = sp.lil_matrix((c, c))
    for i in range(1, c - 1):
        D[i, i - 1:i + 2] = [1.0, -2.0, 1.0]
    if c >= 4:
        D[0, :4] = [2.0, -5.0, 4.0, -1.0]
        D[c - 1, c - 4:] = [-1.0, 4.0, -5.0, 2.0]
    else:
        D[0, :3] = [1.0, -2.0, 1.0]
        D[c - 1, c - 3:] = [1.0, -2.0, 1.0]
    return (D / h**2).tocsr()


def _d1_1d(c: int, h: float) -> sp.csr_matrix:
    D = sp.lil_matrix((c, c))
    for i in range(1, c - 1):
        D[i, i - 1] = -1.0
        D[i, i + 1] = 1.0
    D[0, :3] = [-3.0, 4.0, -1.0]
    D[c - 1, c - 3:] = [1.0, -4.0, 3.0]
    return (D / (2.0 * h)).tocsr()


def _axis_operator(grid: Grid, d: int, D1d) -> sp.csr_matrix:
    mats = [sp.identity(c, format="csr") for c in grid.counts]
    mats[d] = D1d
    return reduce(lambda a, b: sp.kron(a, b, format="csr"), mats[::-1])


def hessian_operator(grid: Grid) -> sp.csr_matrix:
    """Sparse matrix mapping nodal xi to the flattened ``(n_nodes, n, n)`` Hessian."""
    cache = grid.__dict__.get("_hessian_op")
    if cache is not None:
        return cache
    n = grid.dim
    first = [_axis_operator(grid, d, _d1_1d(grid.counts[d], grid.h[d])) for d in range(n)]
    blocks = [[None] * n for _ in range(n)]
    for d in range(n):
        for e in range(n):
            if d == e:
                blocks[d][e] = _axis_operator(grid, d, _d2_1d(grid.counts[d], grid.h[d]))
            else:
                blocks[d][e] = first[d] @ first[e]
    # rows ordered (k, d, e) -> k*n*n + d*n + e
    stacked = sp.vstack([blocks[d][e] for d in range(n) for e in range(n)], format="csr")
    N = grid.n_nodes
    perm = np.arange(n * n * N).reshape(n * n, N).T.ravel()
    op = stacked[perm].tocsr()
    grid.__dict__["_hessian_op"] = op
    return op


def discrete_hessian(grid: Grid, xi: np.ndarray) -> np.ndarray:
    """Nodal second-difference Hessian of a scalar field, ``(n_nodes, n, n)``."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (grid.n_nodes,):
        raise GridError("scalar field does not match grid")
    n = grid.dim
    return (hessian_operator(grid) @ xi).reshape(grid.n_nodes, n, n)


def hessian_transpose(grid: Grid, W: np.ndarray) -> np.ndarray:
    """Exact transpose of :func:`discrete_hessian` applied to a matrix field."""
    return hessian_operator(grid).T @ np.asarray(W, dtype=float).reshape(-1)


# -- field files -----------------------------------------------------------------

FIELD_KINDS = {"scalar": 1, "vec2": 2, "matrix": None}


def write_field(path, kind: str, grid: Grid, values: np.ndarray) -> None:
    """Write a nodal field in the plain-text ``FIELD`` format."""
    if kind not in FIELD_KINDS:
        raise ValueError(f"unknown field kind '{kind}'")
    values = np.asarray(values, dtype=float).reshape(grid.n_nodes, -1)
    ncol = FIELD_KINDS[kind] or grid.dim**2
    if values.shape[1] != ncol:
        raise ValueError(f"{kind} field needs {ncol} values per node")
    header = " ".join(
        ["FIELD", kind, str(grid.dim)]
        + [str(c) for c in grid.counts]
        + [repr(v) for v in grid.lo]
        + [repr(v) for v in grid.hi]
    )
    lines = [header] + [" ".join(repr(float(v)) for v in row) for row in values]
    Path(path).write_text("\n".join(lines) + "\n")


def read_field(path):
    """Read a ``FIELD`` file; returns ``(kind, grid, values)``."""
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    if head[0] != "FIELD" or head[1] not in FIELD_KINDS:
        raise ValueError(f"{path}: not a field file")
    kind, n = head[1], int(head[2])
    counts = [int(v) for v in head[3:3 + n]]
    lo = [float(v) for v in head[3 + n:3 + 2 * n]]
    hi = [float(v) for v in head[3 + 2 * n:3 + 3 * n]]
    grid = Grid(tuple(lo), tuple(hi), tuple(counts))
    values = np.array([[float(v) for v in ln.split()] for ln in lines[1:] if ln.strip()])
    if values.shape[0] != grid.n_nodes:
        raise ValueError(f"{path}: expected {grid.n_nodes} rows, got {values.shape[0]}")
    if kind == "scalar":
        values = values[:, 0]
    elif kind == "matrix":
        values = values.reshape(grid.n_nodes, n, n)
    return kind, grid, values


def write_vtk(path, grid: Grid, fields: dict) -> None:
    """Legacy VTK STRUCTURED_POINTS export of nodal scalar/vec2 fields."""
    dims = list(grid.counts) + [1] * (3 - grid.dim)
    h = list(grid.h) + [1.0] * (3 - grid.dim)
    lo = list(grid.lo) + [0.0] * (3 - grid.dim)
    out = [
        "# vtk DataFile Version 3.0",
        "fluotomo field export",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS " + " ".join(map(str, dims)),
        "ORIGIN " + " ".join(map(repr, lo)),
        "SPACING " + " ".join(map(repr, map(float, h))),
        f"POINT_DATA {grid.n_nodes}",
    ]
    for name, vals in fields.items():
        vals = np.asarray(vals, dtype=float).reshape(grid.n_nodes, -1)
        for j in range(vals.shape[1]):
            label = name if vals.shape[1] == 1 else f"{name}_{j}"
            out += [f"SCALARS {label} double 1", "LOOKUP_TABLE default"]
            out += [repr(float(v)) for v in vals[:, j]]
    Path(path).write_text("\n".join(out) + "\n")
