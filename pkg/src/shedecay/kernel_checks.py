"""The kernel bound suite: every explicit heat-kernel inequality, checked on fixed grids.

Each check yields rows {check, params, lhs, rhs, pass}; a row passes when
lhs <= rhs. Lower bounds are written with the sides swapped so that the
comparison is always the same.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .grid import GridFunction, grid_nodes
from .kernel import (
    HOLDER_EXPONENTS,
    apply_semigroup,
    free_kernel_eval,
    interpolation_sides,
    kernel_eval,
    kernel_l2_diff_space,
    kernel_l2_diff_time,
    kernel_row,
    l2_diff_quadrature,
    load_constants,
    semigroup_space_ratio,
    semigroup_test_functions,
    semigroup_time_sides,
    space_diff_ratio,
)

SANDWICH_TIMES = tuple(float(v) for v in np.logspace(-3, 2, 40))
SANDWICH_POINTS = (-0.9, -0.4, 0.0, 0.35, 0.8)
SANDWICH_TOL = 1e-10
CONSERVATION_N = 512
CONSERVATION_TOL = 1e-8
COMPOSITION_TOL = 1e-6
TIME_DIFF_TIMES = (0.1, 0.5, 2.0)
TIME_DIFF_DELTAS = (0.01, 0.1, 0.5)
TIME_DIFF_POINTS = tuple(float(v) for v in np.linspace(-1.0, 1.0, 9))
QUADRATURE_POINTS = 10_000
QUADRATURE_TOL = 1e-6
SPACE_DIFF_TIMES = tuple(float(v) for v in np.logspace(-3, 2, 13))
SPACE_DIFF_POINTS = tuple(float(v) for v in np.linspace(-0.95, 0.95, 12))
SEMIGROUP_N = 256
SEMIGROUP_TIMES = (2e-3, 0.05, 0.3, 2.0)
SEMIGROUP_DELTAS = (1e-3, 0.1, 1.0)
SEMIGROUP_EPS = (0.25, 0.75)
_REL_SLACK = 1e-9


@dataclass(frozen=True)
class CheckRow:
    check: str
    params: dict
    lhs: float
    rhs: float

    @property
    def passed(self) -> bool:
        return bool(self.lhs <= self.rhs)

    def row(self) -> dict:
        return {"check": self.check, "params": self.params, "lhs": self.lhs, "rhs": self.rhs, "pass": self.passed}


def _pairs(points):
    return [(x, y) for x in points for y in points]


def check_sandwich(times=SANDWICH_TIMES, points=SANDWICH_POINTS, tol=SANDWICH_TOL) -> Iterator[CheckRow]:
    """G_t(x-y) <= p_t(x,y) <= 2 max(t^-1/2, 1), both with absolute tolerance."""
    for t in times:
        for x, y in _pairs(points):
            p = kernel_eval(t, x, y)
            g = float(free_kernel_eval(t, x - y)) if abs(x - y) <= 1 else float(free_kernel_eval(t, 2 - abs(x - y)))
            yield CheckRow("sandwich_lower", {"t": t, "x": x, "y": y}, g - tol, p)
            yield CheckRow("sandwich_upper", {"t": t, "x": x, "y": y}, p, 2.0 * max(t ** -0.5, 1.0) + tol)


def check_sup_lower(times=SANDWICH_TIMES, points=SANDWICH_POINTS) -> Iterator[CheckRow]:
    """sup_{x,y} p_t(x,y) >= max(t^-1/2, 1) / 4."""
    for t in times:
        sup = max(kernel_eval(t, x, y) for x, y in _pairs(points))
        yield CheckRow("sup_lower", {"t": t}, 0.25 * max(t ** -0.5, 1.0), sup)


def check_conservation(times=SANDWICH_TIMES, n_space=CONSERVATION_N, tol=CONSERVATION_TOL) -> Iterator[CheckRow]:
    """Quadrature of int p_t(x, .) equals 1 (every grid x, by circulant symmetry)."""
    for t in times:
        total = float(kernel_row(t, n_space).sum() * 2.0 / n_space)
        yield CheckRow("conservation", {"t": t, "n_space": n_space}, abs(total - 1.0), tol)


def check_chapman_kolmogorov(times=SANDWICH_TIMES, n_space=CONSERVATION_N, tol=COMPOSITION_TOL) -> Iterator[CheckRow]:
    """P_t P_t f = P_2t f on a smooth positive f."""
    x = grid_nodes(n_space)
    f = GridFunction(np.exp(-0.5 * (x / 0.1) ** 2) + 0.2)
    for t in times:
        twice = apply_semigroup(t, apply_semigroup(t, f)).values
        once = apply_semigroup(2 * t, f).values
        yield CheckRow("chapman_kolmogorov", {"t": t, "n_space": n_space}, float(np.max(np.abs(twice - once))), tol)


def _quadrature_oracle(kernel_a: Callable, kernel_b: Callable, n: int = QUADRATURE_POINTS) -> float:
    w = np.linspace(-1.0, 1.0, n, endpoint=False)
    return l2_diff_quadrature(kernel_a(w), kernel_b(w))


def check_time_difference(times=TIME_DIFF_TIMES, deltas=TIME_DIFF_DELTAS, points=TIME_DIFF_POINTS) -> Iterator[CheckRow]:
    """int |p_{t+d}(x,.) - p_t(x,.)|^2 <= sqrt(pi/2t) min(1, d/4t), plus quadrature agreement."""
    for t in times:
        for d in deltas:
            for x in points:
                val = kernel_l2_diff_time(t, d, x)
                bound = math.sqrt(math.pi / (2 * t)) * min(1.0, d / (4 * t))
                params = {"t": t, "delta": d, "x": x}
                yield CheckRow("time_difference", params, val, bound)
                quad = _quadrature_oracle(lambda w: kernel_eval(t + d, x, w), lambda w: kernel_eval(t, x, w))
                yield CheckRow("time_difference_quadrature", params, abs(val - quad), QUADRATURE_TOL)


def check_space_difference(constants: dict, times=SPACE_DIFF_TIMES, points=SPACE_DIFF_POINTS) -> Iterator[CheckRow]:
    """Lipschitz and Hoelder forms of the spatial L2 difference with frozen constants."""
    x = np.asarray(points)[:, None]
    y = np.asarray(points)[None, :]
    for t in times:
        worst = float(np.max(space_diff_ratio(t, x, y)))
        yield CheckRow("space_difference_lipschitz", {"t": t}, worst, constants["lipschitz"])
        for d in HOLDER_EXPONENTS:
            worst = float(np.max(space_diff_ratio(t, x, y, d)))
            yield CheckRow("space_difference_holder", {"t": t, "exponent": d}, worst, constants[f"holder_{d}"])
    for t, xa, ya in ((0.2, 0.0, 0.1), (0.01, -0.3, 0.45), (1.5, 0.9, -0.9)):
        val = kernel_l2_diff_space(t, xa, ya)
        quad = _quadrature_oracle(lambda w: kernel_eval(t, xa, w), lambda w: kernel_eval(t, ya, w))
        yield CheckRow("space_difference_quadrature", {"t": t, "x": xa, "y": ya}, abs(val - quad), QUADRATURE_TOL)


def check_semigroup(constants: dict, n_space=SEMIGROUP_N) -> Iterator[CheckRow]:
    """Time and space regularity of P_t h, and the interpolation bound on ||P_t h||_inf."""
    funcs = semigroup_test_functions(n_space)
    for name, f in funcs.items():
        for t in SEMIGROUP_TIMES:
            for eps in SEMIGROUP_EPS:
                for d in SEMIGROUP_DELTAS:
                    lhs, rhs = semigroup_time_sides(t, d, f, eps)
                    yield CheckRow("semigroup_time", {"f": name, "t": t, "delta": d, "eps": eps}, lhs, rhs * (1 + _REL_SLACK))
                ratio = semigroup_space_ratio(t, f, eps)
                yield CheckRow("semigroup_space", {"f": name, "t": t, "eps": eps}, ratio, constants["semigroup_space"])
                lhs, rhs = interpolation_sides(t, eps, f)
                yield CheckRow("interpolation", {"f": name, "t": t, "eps": eps}, lhs, rhs * (1 + _REL_SLACK))


def run_kernel_suite(constants_path: str | Path | None = None) -> list[CheckRow]:
    constants = load_constants(constants_path)["constants"]
    rows: list[CheckRow] = []
    for part in (
        check_sandwich(),
        check_sup_lower(),
        check_conservation(),
        check_chapman_kolmogorov(),
        check_time_difference(),
        check_space_difference(constants),
        check_semigroup(constants),
    ):
        rows.extend(part)
    return rows
