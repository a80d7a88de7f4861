from __future__ import annotations

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from fluotomo.coefficients import constant_coefficients  # noqa: E402
from fluotomo.functionals import EnergyParams, MeasurementData  # noqa: E402
from fluotomo.grid import boundary_subset, build_grid  # noqa: E402
from fluotomo.robin import Source  # noqa: E402


def small_problem(counts=(9, 11), n_sources=2, seed=1, M=2.0):
    """Nonsymmetric coefficients, a volume and a boundary source, random data."""
    rng = np.random.default_rng(seed)
    g = build_grid((0, 0), (1, 1), counts)
    c = constant_coefficients(g, A=0.5, lam=0.7, kappa=0.8, k=(0.9, 0.3), h=(0.7, 0.4),
                              gamma=1.2, M=M)
    gammas = [boundary_subset(g, "x0_min"), boundary_subset(g, "x1_max+x0_max")][:n_sources]
    sources = [Source(S=np.stack([1 + g.coords[:, 0], g.coords[:, 1]], 1)),
               Source(s=lambda x, n: np.stack([np.ones(len(x)), x[:, 0]], 1), s_set=gammas[0])]
    data = MeasurementData(gammas, [0.1 * rng.standard_normal((len(gg.nodes), 2)) for gg in gammas])
    xi = rng.uniform(0.3, 1.5, g.n_nodes)
    return c, sources[:n_sources], data, xi, rng


@pytest.fixture
def problem():
    return small_problem()


def params(p, alpha=1e-3, m=5.0, M=2.0):
    return EnergyParams(p, m, alpha, M)


ACCEPTANCE: list = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
