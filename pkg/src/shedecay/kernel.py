"""Periodic heat kernel on the torus [-1, 1] and its semigroup.

The kernel of d/dt - d^2/dx^2 with periodic boundary conditions is the
wrapped Gaussian

    p_t(x, y) = sum_n G_t(x - y + 2n),   G_t(a) = (4 pi t)^(-1/2) exp(-a^2 / (4t)),

evaluated here by a truncated image sum whose Gaussian tail is certified
against an absolute tolerance.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .grid import TORUS_LENGTH, GridFunction, torus_point

DEFAULT_ABS_TOLERANCE = 1e-12
_MAX_ORDER = 100_000


class TruncationError(ValueError):
    """The requested truncation order cannot certify the requested tolerance."""


@dataclass(frozen=True)
class KernelParams:
    """Truncation control for the image sum.

    ``truncation_order=None`` picks the smallest order whose certified tail
    is below ``abs_tolerance`` for the requested times.
    """

    truncation_order: int | None = None
    abs_tolerance: float = DEFAULT_ABS_TOLERANCE

    def __post_init__(self) -> None:
        if self.truncation_order is not None and self.truncation_order < 1:
            raise ValueError("truncation_order must be >= 1")
        if not self.abs_tolerance >= 0:
            raise ValueError("abs_tolerance must be nonnegative")


def _check_time(t, name: str = "t") -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError(f"{name} must be > 0, got {t!r}")
    return arr


def free_kernel_eval(t, a):
    """Free-space heat kernel G_t(a)."""
    tt = _check_time(t)
    a = np.asarray(a, dtype=float)
    out = np.exp(-(a * a) / (4.0 * tt)) / np.sqrt(4.0 * np.pi * tt)
    return float(out) if out.ndim == 0 else out


def image_tail_bound(t: float, order: int) -> float:
    """Upper bound on sum_{|n| > order} G_t(x - y + 2n) over all x, y in [-1, 1].

    For |n| > N and |x - y| <= 2 we have |x - y + 2n| >= 2N, so the tail is at
    most 2 (4 pi t)^(-1/2) sum_{m >= N} exp(-m^2/t), and the last sum is
    dominated by a geometric series with ratio exp(-(2N+1)/t).
    """
    t = float(t)
    if t <= 0:
        raise ValueError("t must be > 0")
    lead = math.exp(-order * order / t)
    if lead == 0.0:
        return 0.0
    ratio = math.exp(-(2 * order + 1) / t)
    return 2.0 * lead / ((1.0 - ratio) * math.sqrt(4.0 * math.pi * t))


def required_order(t_max: float, abs_tolerance: float) -> int:
    """Smallest N >= 1 whose certified tail at the largest time is <= tolerance."""
    # the tail bound is increasing in t, so the largest t governs
    lo = 1
    if image_tail_bound(t_max, lo) <= abs_tolerance:
        return lo
    hi = 2
    while image_tail_bound(t_max, hi) > abs_tolerance:
        hi *= 2
        if hi > _MAX_ORDER:
            raise TruncationError(f"no truncation order up to {_MAX_ORDER} certifies tol={abs_tolerance} at t={t_max}")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if image_tail_bound(t_max, mid) <= abs_tolerance:
            hi = mid
        else:
            lo = mid
    return hi


def resolve_order(t, params: KernelParams) -> int:
    t_max = float(np.max(np.asarray(t, dtype=float)))
    if params.truncation_order is None:
        return required_order(t_max, params.abs_tolerance)
    tail = image_tail_bound(t_max, params.truncation_order)
    if tail > params.abs_tolerance:
        raise TruncationError(
            f"truncation_order={params.truncation_order} leaves certified tail {tail:.3e} "
            f"> abs_tolerance={params.abs_tolerance:.3e} at t={t_max}"
        )
    return params.truncation_order


def _wrapped_sum(t: np.ndarray, a: np.ndarray, order: int) -> np.ndarray:
    n = np.arange(-order, order + 1, dtype=float)
    shifted = a[..., None] + TORUS_LENGTH * n
    tt = t[..., None]
    terms = np.exp(-(shifted * shifted) / (4.0 * tt))
    return terms.sum(axis=-1) / np.sqrt(4.0 * np.pi * t)


def kernel_eval(t, x, y, params: KernelParams | None = None):
    """Periodic heat kernel p_t(x, y); broadcasts over array arguments."""
    params = params or KernelParams()
    tt = _check_time(t)
    # the kernel is even in x - y; folding the sign makes p_t(x, y) == p_t(y, x) bit for bit
    a = np.abs(np.asarray(torus_point(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)), dtype=float))
    tt, a = np.broadcast_arrays(tt, a)
    order = resolve_order(tt, params)
    out = _wrapped_sum(tt, a, order)
    return float(out) if out.ndim == 0 else out


def kernel_row(t: float, n_space: int, params: KernelParams | None = None) -> np.ndarray:
    """p_t(x_k, x_0) for grid offsets k = 0..n-1; the circulant generator."""
    offsets = np.arange(n_space) * (TORUS_LENGTH / n_space)
    return np.asarray(kernel_eval(t, offsets, 0.0, params))


def semigroup_matrix(t: float, n_space: int, params: KernelParams | None = None) -> np.ndarray:
    """Quadrature matrix Q with (Q f)_i = dx * sum_j p_t(x_i, x_j) f_j."""
    row = kernel_row(t, n_space, params)
    idx = (np.arange(n_space)[:, None] - np.arange(n_space)[None, :]) % n_space
    return row[idx] * (TORUS_LENGTH / n_space)


def apply_semigroup(t: float, f: GridFunction, params: KernelParams | None = None) -> GridFunction:
    """Periodic-trapezoid quadrature of (P_t f)(x_i) = int p_t(x_i, y) f(y) dy."""
    if not t >= 0:
        raise ValueError(f"t must be >= 0, got {t!r}")
    if t == 0:
        return f
    return GridFunction(semigroup_matrix(t, f.n_space, params) @ f.values)


def kernel_l2_diff_space(t, x, y, params: KernelParams | None = None):
    """int |p_t(x, w) - p_t(y, w)|^2 dw = p_2t(x,x) + p_2t(y,y) - 2 p_2t(x,y).

    Evaluated as 2 sum_n G_2t(2n) (1 - exp(-a(4n + a)/(8t))) with a = x - y,
    which avoids the cancellation of the three-term form when x is near y.
    """
    params = params or KernelParams()
    tt = _check_time(t)
    a = np.asarray(torus_point(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)), dtype=float)
    tt, a = np.broadcast_arrays(tt, a)
    order = resolve_order(2.0 * tt, params) + 1
    n = np.arange(-order, order + 1, dtype=float)
    t2 = 2.0 * tt[..., None]
    g = np.exp(-((2.0 * n) ** 2) / (4.0 * t2)) / np.sqrt(4.0 * np.pi * t2)
    aa = a[..., None]
    z = -aa * (4.0 * n + aa) / (4.0 * t2)
    with np.errstate(over="ignore", invalid="ignore"):
        shifted = np.exp(-((2.0 * n + aa) ** 2) / (4.0 * t2)) / np.sqrt(4.0 * np.pi * t2)
        terms = np.where(z < 1.0, g * -np.expm1(np.minimum(z, 1.0)), g - shifted)
    out = np.maximum(2.0 * terms.sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def kernel_l2_diff_time(t, delta, x=0.0, params: KernelParams | None = None):
    """int |p_{t+delta}(x, w) - p_t(x, w)|^2 dw = p_2(t+d)(x,x) + p_2t(x,x) - 2 p_(2t+d)(x,x)."""
    params = params or KernelParams()
    tt = _check_time(t)
    dd = np.asarray(delta, dtype=float)
    if np.any(~(dd >= 0)):
        raise ValueError(f"delta must be >= 0, got {delta!r}")
    tt, dd, xx = np.broadcast_arrays(tt, dd, np.asarray(x, dtype=float))
    val = (
        kernel_eval(2.0 * (tt + dd), xx, xx, params)
        + kernel_eval(2.0 * tt, xx, xx, params)
        - 2.0 * np.asarray(kernel_eval(2.0 * tt + dd, xx, xx, params))
    )
    out = np.maximum(np.asarray(val, dtype=float), 0.0)
    out = np.where(dd == 0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def l2_diff_quadrature(f_x: np.ndarray, f_y: np.ndarray) -> float:
    """Periodic trapezoid of |f_x - f_y|^2 over a uniform grid on the torus."""
    diff = np.asarray(f_x) - np.asarray(f_y)
    return float(np.sum(diff * diff) * TORUS_LENGTH / diff.size)


def sandwich_bounds(t, x, y):
    """(G_t(x - y), 2 max(t^-1/2, 1)): the two sides of the kernel sandwich."""
    tt = _check_time(t)
    a = torus_point(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
    lower = free_kernel_eval(tt, a)
    upper = 2.0 * np.maximum(1.0 / np.sqrt(tt), 1.0)
    return lower, upper


def interpolation_bound_check(t: float, eps: float, u0: GridFunction, params: KernelParams | None = None,
                              rel_slack: float = 1e-9) -> bool:
    """Check ||P_t u0||_inf <= 2 (t^-1/2 v 1)^(1-eps) ||u0||_inf^eps ||u0||_L1^(1-eps)."""
    lhs, rhs = interpolation_sides(t, eps, u0, params)
    return bool(lhs <= rhs * (1.0 + rel_slack))


def interpolation_sides(t: float, eps: float, u0: GridFunction,
                        params: KernelParams | None = None) -> tuple[float, float]:
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps!r}")
    if not t > 0:
        raise ValueError(f"t must be > 0, got {t!r}")
    if np.any(u0.values < 0):
        raise ValueError("u0 must be nonnegative")
    if not np.any(u0.values > 0):
        raise ValueError("u0 must not vanish identically")
    lhs = apply_semigroup(t, u0, params).sup_norm()
    scale = max(t ** -0.5, 1.0)
    rhs = 2.0 * scale ** (1.0 - eps) * u0.sup_norm() ** eps * u0.l1_norm() ** (1.0 - eps)
    return lhs, rhs


# ---------------------------------------------------------------------------
# frozen constants for the existential kernel bounds

CONSTANTS_FILE = "kernel_constants.json"


def load_constants(path: str | Path | None = None) -> dict:
    """Read the frozen fitted constants (packaged fixture unless ``path`` is given)."""
    if path is None:
        text = resources.files("shedecay.data").joinpath(CONSTANTS_FILE).read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


FIT_TIMES = tuple(float(v) for v in np.logspace(-3, 2, 21))
FIT_POINTS = tuple(float(v) for v in np.linspace(-1.0, 1.0, 17))
HOLDER_EXPONENTS = (0.25, 0.5, 0.75)


def space_diff_ratio(t, x, y, delta: float | None = None):
    """kernel_l2_diff_space divided by its scale |x-y|^d / (t^((d+1)/2) ^ t^(d/2)).

    ``delta=None`` means the Lipschitz scale |x-y| / (t ^ sqrt t).
    """
    val = np.asarray(kernel_l2_diff_space(t, x, y))
    dist = np.abs(np.asarray(torus_point(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))))
    tt = np.asarray(t, dtype=float)
    if delta is None:
        scale = dist / np.minimum(tt, np.sqrt(tt))
    else:
        scale = dist ** delta / np.minimum(tt ** ((delta + 1) / 2), tt ** (delta / 2))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(dist > 0, val / np.where(scale > 0, scale, 1.0), 0.0)


def semigroup_space_ratio(t: float, f: GridFunction, eps: float, params: KernelParams | None = None) -> float:
    """max_{i,j} |P_t f(x_i) - P_t f(x_j)| / (max(1, t^-1/2) |x_i-x_j|^(eps/2) ||f||_inf^eps ||f||_1^(1-eps))."""
    pf = apply_semigroup(t, f, params).values
    x = f.nodes
    dist = np.abs(torus_point(x[:, None] - x[None, :]))
    num = np.abs(pf[:, None] - pf[None, :])
    norm = max(1.0, t ** -0.5) * f.sup_norm() ** eps * f.l1_norm() ** (1 - eps)
    mask = dist > 0
    return float(np.max(num[mask] / (norm * dist[mask] ** (eps / 2))))


def semigroup_time_sides(t: float, delta: float, f: GridFunction, eps: float,
                         params: KernelParams | None = None) -> tuple[float, float]:
    """(sup_x |P_{t+d} f - P_t f|, 4 (1 + t^-1/2) min(1, (d/4t)^(eps/2)) ||f||_inf^eps ||f||_1^(1-eps))."""
    a = apply_semigroup(t + delta, f, params).values
    b = apply_semigroup(t, f, params).values
    lhs = float(np.max(np.abs(a - b)))
    rhs = 4.0 * (1.0 + t ** -0.5) * min(1.0, (delta / (4.0 * t)) ** (eps / 2)) \
        * f.sup_norm() ** eps * f.l1_norm() ** (1 - eps)
    return lhs, rhs


def semigroup_test_functions(n_space: int) -> dict[str, GridFunction]:
    """A small deterministic family of h in L1 and L_inf used by the bound suite."""
    x = np.linspace(-1.0, 1.0, n_space, endpoint=False)
    return {
        "constant": GridFunction(np.ones(n_space)),
        "cosine": GridFunction(1.0 + np.cos(np.pi * x)),
        "narrow_bump": GridFunction(np.exp(-0.5 * (x / 0.05) ** 2)),
        "step": GridFunction((np.abs(x) < 0.25).astype(float)),
        "two_bumps": GridFunction(np.exp(-0.5 * ((x - 0.5) / 0.1) ** 2) + 0.5 * np.exp(-0.5 * ((x + 0.4) / 0.2) ** 2)),
    }


SEMIGROUP_FIT_TIMES = (1e-3, 1e-2, 0.1, 1.0, 10.0)
SEMIGROUP_FIT_EPS = (0.1, 0.5, 0.9)
SEMIGROUP_FIT_N = 256


def fit_constants(times=FIT_TIMES, points=FIT_POINTS) -> dict:
    """Empirical sup of each normalized ratio over the fitting grid."""
    x = np.asarray(points)[:, None]
    y = np.asarray(points)[None, :]
    fitted = {"lipschitz": 0.0, **{f"holder_{d}": 0.0 for d in HOLDER_EXPONENTS}}
    for t in times:
        fitted["lipschitz"] = max(fitted["lipschitz"], float(np.max(space_diff_ratio(t, x, y))))
        for d in HOLDER_EXPONENTS:
            key = f"holder_{d}"
            fitted[key] = max(fitted[key], float(np.max(space_diff_ratio(t, x, y, d))))
    funcs = semigroup_test_functions(SEMIGROUP_FIT_N)
    fitted["semigroup_space"] = max(
        semigroup_space_ratio(tt, f, e) for tt in SEMIGROUP_FIT_TIMES for f in funcs.values() for e in SEMIGROUP_FIT_EPS
    )
    return fitted
