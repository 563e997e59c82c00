"""Quadrature certificates for the real-variable integral bound and its beta-function corollary.

For eps in (0,1), alpha in [0,1), beta >= 1 the quantity

    I(t) = int_0^t (t/s)^(1-eps) exp(-beta (t-s)) (t-s)^(-alpha) ds
         = t^(1-alpha) int_0^1 r^(eps-1) (1-r)^(-alpha) exp(-beta t (1-r)) dr

is bounded uniformly in t by (2 Gamma(1-alpha) + 1) / ((1-alpha) eps beta^(1-alpha)).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from itertools import product

import numpy as np
from scipy import special

DEFAULT_T_GRID = tuple(float(v) for v in np.logspace(-3, 3, 40))
LATTICE_EPS = tuple(round(0.1 * k, 1) for k in range(1, 10))
LATTICE_ALPHA = (0.0, 0.25, 0.5, 0.75)
LATTICE_BETA = (1.0, 2.0, 8.0, 64.0)
_GL_NODES = 16
_LEVELS = 60
_REL_TOL = 1e-6


class QuadratureError(ArithmeticError):
    """Successive refinements of the quadrature disagree beyond tolerance."""


@dataclass(frozen=True)
class IJQuery:
    eps: float
    alpha: float
    beta: float
    t_grid: tuple[float, ...] = DEFAULT_T_GRID
    panels_per_level: int = 4

    def __post_init__(self) -> None:
        if not 0 < self.eps < 1:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if not 0 <= self.alpha < 1:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not self.beta >= 1:
            raise ValueError(f"beta must be >= 1, got {self.beta}")
        if not all(t > 0 for t in self.t_grid):
            raise ValueError("t_grid must be positive")
        if self.panels_per_level < 1:
            raise ValueError("panels_per_level must be >= 1")


@dataclass(frozen=True)
class IJCertificate:
    eps: float
    alpha: float
    beta: float
    sup_value: float
    bound: float
    margin: float
    passed: bool
    argmax_t: float
    refinement_change: float = field(default=0.0)

    def row(self) -> dict:
        out = asdict(self)
        out["pass"] = out.pop("passed")
        return out

    def to_json(self) -> str:
        return json.dumps(self.row(), sort_keys=True)


def _graded_rule(length: float, panels_per_level: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of composite Gauss-Legendre on graded panels of [0, length]."""
    xg, wg = np.polynomial.legendre.leggauss(_GL_NODES)
    pts = np.concatenate([[0.0], length * 2.0 ** -np.arange(_LEVELS, -1, -1, dtype=float)])
    if panels_per_level > 1:
        fine = [pts[:1]]
        for lo, hi in zip(pts[:-1], pts[1:]):
            fine.append(np.linspace(lo, hi, panels_per_level + 1)[1:])
        pts = np.concatenate(fine)
    lo, hi = pts[:-1, None], pts[1:, None]
    half = 0.5 * (hi - lo)
    nodes = (lo + half * (1.0 + xg)).ravel()
    weights = (half * wg).ravel()
    return nodes, weights


def ij_integral(t, eps: float, alpha: float, beta: float, panels_per_level: int = 4) -> np.ndarray:
    """I(t) by singularity-removing substitutions on each half of [0, 1].

    On r in [0, 1/2] put r = v^(1/eps), so r^(eps-1) dr = dv / eps; on
    r in [1/2, 1] put 1 - r = w^(1/(1-alpha)), so (1-r)^(-alpha) dr = dw / (1-alpha).
    Both transformed integrands are bounded; panels are graded toward the
    substituted endpoint, where the exponential factor concentrates for large t.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))[:, None]
    bt = beta * t
    a1 = 1.0 / (1.0 - alpha)

    v, wv = _graded_rule(0.5 ** eps, panels_per_level)
    r = v ** (1.0 / eps)
    left = ((1.0 - r) ** -alpha * np.exp(-bt * (1.0 - r))) @ wv / eps

    w, ww = _graded_rule(0.5 ** (1.0 - alpha), panels_per_level)
    q = w ** a1
    right = ((1.0 - q) ** (eps - 1.0) * np.exp(-bt * q)) @ ww * a1

    return (t[:, 0] ** (1.0 - alpha)) * (left + right)


def ij_integral_hypergeometric(t, eps: float, alpha: float, beta: float) -> np.ndarray:
    """Closed form t^(1-alpha) B(eps, 1-alpha) 1F1(1-alpha; 1-alpha+eps; -beta t) (oracle)."""
    t = np.asarray(t, dtype=float)
    return t ** (1.0 - alpha) * special.beta(eps, 1.0 - alpha) * special.hyp1f1(1.0 - alpha, 1.0 - alpha + eps, -beta * t)


def ij_bound(eps: float, alpha: float, beta: float) -> float:
    return (2.0 * math.gamma(1.0 - alpha) + 1.0) / ((1.0 - alpha) * eps * beta ** (1.0 - alpha))


def verify_lemma_ij(q: IJQuery, rel_tol: float = _REL_TOL) -> IJCertificate:
    """Sup of I over the t-grid against the closed-form bound, with a refinement check."""
    grid = np.asarray(q.t_grid)
    coarse = ij_integral(grid, q.eps, q.alpha, q.beta, q.panels_per_level)
    fine = ij_integral(grid, q.eps, q.alpha, q.beta, 2 * q.panels_per_level)
    sup_coarse, sup_fine = float(coarse.max()), float(fine.max())
    change = abs(sup_fine - sup_coarse) / abs(sup_fine)
    if change > rel_tol:
        raise QuadratureError(
            f"(eps={q.eps}, alpha={q.alpha}, beta={q.beta}): refinement changed sup by {change:.2e} > {rel_tol:.0e}"
        )
    bound = ij_bound(q.eps, q.alpha, q.beta)
    return IJCertificate(
        eps=q.eps, alpha=q.alpha, beta=q.beta, sup_value=sup_fine, bound=bound,
        margin=bound - sup_fine, passed=sup_fine <= bound, argmax_t=float(grid[int(np.argmax(fine))]),
        refinement_change=change,
    )


def default_lattice() -> list[IJQuery]:
    return [IJQuery(e, a, b) for e, a, b in product(LATTICE_EPS, LATTICE_ALPHA, LATTICE_BETA)]


def verify_lattice(queries: list[IJQuery] | None = None) -> list[IJCertificate]:
    return [verify_lemma_ij(q) for q in (queries or default_lattice())]


@dataclass(frozen=True)
class BetaCertificate:
    eps: float
    alpha: float
    beta_value: float
    quadrature_value: float
    bound: float
    passed: bool

    def row(self) -> dict:
        out = asdict(self)
        out["pass"] = out.pop("passed")
        return out


def beta_by_quadrature(eps: float, alpha: float, panels_per_level: int = 4) -> float:
    """B(eps, 1-alpha) with the same substitutions used for I(t) (t -> 0 limit)."""
    v, wv = _graded_rule(0.5 ** eps, panels_per_level)
    left = ((1.0 - v ** (1.0 / eps)) ** -alpha) @ wv / eps
    w, ww = _graded_rule(0.5 ** (1.0 - alpha), panels_per_level)
    right = ((1.0 - w ** (1.0 / (1.0 - alpha))) ** (eps - 1.0)) @ ww / (1.0 - alpha)
    return float(left + right)


def verify_beta_bound(eps: float, alpha: float, rel_slack: float = 1e-12) -> BetaCertificate:
    """B(eps, 1-alpha) <= 1 / (eps (1-alpha)); equality when alpha = 0."""
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    value = float(special.beta(eps, 1.0 - alpha))
    bound = 1.0 / (eps * (1.0 - alpha))
    return BetaCertificate(eps, alpha, value, beta_by_quadrature(eps, alpha), bound, value <= bound * (1 + rel_slack))
