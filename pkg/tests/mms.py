"""Manufactured solutions for the generic Robin system ``-div(B Du) + L u = f``."""

from __future__ import annotations

import numpy as np

from fluotomo.grid import build_grid, l2_norm
from fluotomo.robin import assemble_rhs, assemble_system, solve_linear

B = np.array([[1.0, 0.2], [0.2, 0.8]])
L = np.array([[1.5, -0.7], [0.7, 1.5]])
GAMMA = 1.3
PI = np.pi


def smooth_solution(x):
    X, Y = x[..., 0], x[..., 1]
    u = np.stack([np.sin(PI * X) * np.sin(PI * Y) + X, np.cos(PI * X) * Y**2], axis=-1)
    grad = np.stack([
        np.stack([PI * np.cos(PI * X) * np.sin(PI * Y) + 1, PI * np.sin(PI * X) * np.cos(PI * Y)], -1),
        np.stack([-PI * np.sin(PI * X) * Y**2, 2 * np.cos(PI * X) * Y], -1),
    ], axis=-2)
    ss, cc = np.sin(PI * X) * np.sin(PI * Y), np.cos(PI * X) * np.cos(PI * Y)
    hess = np.stack([
        np.stack([np.stack([-PI**2 * ss, PI**2 * cc], -1), np.stack([PI**2 * cc, -PI**2 * ss], -1)], -2),
        np.stack([np.stack([-PI**2 * np.cos(PI * X) * Y**2, -2 * PI * np.sin(PI * X) * Y], -1),
                  np.stack([-2 * PI * np.sin(PI * X) * Y, 2 * np.cos(PI * X)], -1)], -2),
    ], axis=-3)
    return u, grad, hess


def bilinear_solution(x):
    X, Y = x[..., 0], x[..., 1]
    u = np.stack([0.3 + 1.1 * X - 0.4 * Y + 0.7 * X * Y, -0.2 + 0.5 * X + 0.9 * Y - 1.3 * X * Y], -1)
    grad = np.stack([np.stack([1.1 + 0.7 * Y, -0.4 + 0.7 * X], -1),
                     np.stack([0.5 - 1.3 * Y, 0.9 - 1.3 * X], -1)], axis=-2)
    zero = np.zeros_like(X)
    hess = np.stack([
        np.stack([np.stack([zero, zero + 0.7], -1), np.stack([zero + 0.7, zero], -1)], -2),
        np.stack([np.stack([zero, zero - 1.3], -1), np.stack([zero - 1.3, zero], -1)], -2),
    ], axis=-3)
    return u, grad, hess


def solve_manufactured(counts, solution, tol=1e-10, method="auto"):
    """Solve on the unit square; return ``(grid, u_h, u_exact_nodal, report)``."""
    grid = build_grid((0.0, 0.0), (1.0, 1.0), counts)
    xq = grid.at_quad(grid.coords)
    u, _, hess = solution(xq)
    f = -np.einsum("de,...jde->...j", B, hess) + np.einsum("ij,...j->...i", L, u)

    def g(points, normals):
        uu, gr, _ = solution(points)
        return np.einsum("...jd,de,...e->...j", gr, B, normals) + GAMMA * uu

    op = assemble_system(grid, B, L, GAMMA)
    rhs = assemble_rhs(grid, f=f, g=g)
    uh, rep = solve_linear(op, rhs, tol, method=method)
    return grid, uh, solution(grid.coords)[0], rep


def observed_orders(counts_list=((17, 17), (33, 33), (65, 65))):
    errs, hs = [], []
    for counts in counts_list:
        grid, uh, ue, _ = solve_manufactured(counts, smooth_solution)
        errs.append(l2_norm(grid, uh - ue))
        hs.append(grid.h[0])
    orders = [np.log(errs[i] / errs[i + 1]) / np.log(hs[i] / hs[i + 1]) for i in range(len(errs) - 1)]
    return errs, orders
