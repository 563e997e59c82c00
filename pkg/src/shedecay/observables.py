"""Scalar functionals of simulated trajectories.

Everything here works on recorded series (mass, sup, inf, quadratic
variation) at the output cadence, or on ensembles of such records.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import GridFunction

CSV_COLUMNS = ("t", "mass", "sup", "inf", "log_mass", "qv_n", "negativity_count")
HEAVY_TAIL_CAVEAT = (
    "log-of-mean moment estimates are dominated by rare large values; at desk-scale "
    "ensemble sizes they are biased low"
)


class HorizonError(ValueError):
    """Requested time lies outside the recorded horizon."""


class NonPositiveError(ValueError):
    """A functional that must be logged is not strictly positive."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class InsufficientEnsembleError(ValueError):
    pass


@dataclass
class TrajectoryRecord:
    """Observables of one trajectory at the output cadence.

    ``negativity_count`` and ``min_inf`` are running (cumulative) series;
    ``martingale`` is the accumulated discrete noise integral lam * sum sigma(u) dW.
    """

    times: np.ndarray
    mass: np.ndarray
    sup: np.ndarray
    inf: np.ndarray
    qv_n: np.ndarray
    negativity: np.ndarray
    min_inf: np.ndarray
    martingale: np.ndarray
    stream: int = 0
    seed: int = 0
    config_digest: str = ""
    lam: float = 0.0
    nu: float = 1.0
    cadence_dt: float = 0.0
    test_mode: bool = False
    snapshots: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.times)
        for name in ("mass", "sup", "inf", "qv_n", "negativity", "min_inf", "martingale"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"series {name!r} has length {len(getattr(self, name))}, expected {n}")
        if n and (self.times[0] != 0 or np.any(np.diff(self.times) <= 0)):
            raise ValueError("times must start at 0 and increase strictly")

    @property
    def negativity_count(self) -> int:
        return int(self.negativity[-1]) if len(self.negativity) else 0

    @property
    def log_mass(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(self.mass)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def index_at(self, t: float) -> int:
        """Index of the recorded time nearest to t."""
        if t < -1e-12 or t > self.times[-1] * (1 + 1e-12) + 1e-12:
            raise HorizonError(f"t={t} outside recorded horizon [0, {self.times[-1]}]")
        return int(np.argmin(np.abs(self.times - t)))

    def series(self, which: str) -> np.ndarray:
        if which not in ("mass", "sup", "inf", "qv_n", "min_inf"):
            raise ValueError(f"unknown series {which!r}")
        return getattr(self, which)

    def to_csv(self, header_lines: Sequence[str] = ()) -> str:
        buf = io.StringIO(newline="")
        for line in header_lines:
            buf.write(f"# {line}\n")
        buf.write(",".join(CSV_COLUMNS) + "\n")
        log_mass = self.log_mass
        for i in range(len(self.times)):
            row = (self.times[i], self.mass[i], self.sup[i], self.inf[i], log_mass[i], self.qv_n[i])
            buf.write(",".join(_fmt(v) for v in row) + f",{int(self.negativity[i])}\n")
        return buf.getvalue()

    def write_csv(self, path: str | Path, header_lines: Sequence[str] = ()) -> None:
        Path(path).write_bytes(self.to_csv(header_lines).encode("ascii"))


def _fmt(v: float) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def read_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Parse a record CSV written by :meth:`TrajectoryRecord.write_csv`."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    if tuple(header) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {header}")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return {name: data[:, i] for i, name in enumerate(header)}


# ---------------------------------------------------------------------------
# per-record functionals

def total_mass(u: GridFunction) -> float:
    """Periodic trapezoid (= rectangle rule) of u over the torus."""
    return float(u.dx * np.sum(u.values))


def mass_event_indicator(record: TrajectoryRecord, t: float, lam: float, L_sigma: float) -> bool:
    """A(t; lam): mass at t is at most M0 exp(-lam^2 L^2 t / 8).

    Ties (mass exactly at the threshold, as at t = 0) resolve to False, so the
    indicator is the event that strict decay has been achieved. A zero noise
    level makes the threshold M0 and the event degenerate; it is False.
    """
    i = record.index_at(t)
    if record.times[i] == 0 or lam * L_sigma == 0:
        return False
    threshold = record.mass[0] * math.exp(-(lam * L_sigma) ** 2 * record.times[i] / 8.0)
    return bool(record.mass[i] < threshold)


def log_decay_slope(record: TrajectoryRecord, window: tuple[float, float], which: str = "mass") -> float:
    """Least-squares slope of log(functional) against time over the window."""
    t_a, t_b = window
    if not t_b > t_a >= 0:
        raise ValueError(f"bad window {window}")
    values = record.series(which)
    sel = np.flatnonzero((record.times >= t_a - 1e-12) & (record.times <= t_b + 1e-12))
    if sel.size < 2:
        raise HorizonError(f"window {window} holds fewer than two recorded times")
    bad = sel[values[sel] <= 0]
    if bad.size:
        raise NonPositiveError(f"{which} is not positive at index {bad[0]} (t={record.times[bad[0]]})", int(bad[0]))
    return _slope(record.times[sel], np.log(values[sel]))


def _slope(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def qv_lower_bound_check(record: TrajectoryRecord, lam: float, L_sigma: float,
                         slack: float = 0.15, t_min: float = 0.1) -> bool:
    """<N>_t / t >= lam^2 L^2 / 2 (1 - slack) at every recorded t >= t_min.

    A test-mode (zero-noise) record is vacuously true.
    """
    if record.test_mode or lam == 0:
        return True
    sel = record.times >= t_min
    if not np.any(sel):
        return True
    ratio = record.qv_n[sel] / record.times[sel]
    return bool(np.all(ratio >= 0.5 * (lam * L_sigma) ** 2 * (1.0 - slack)))


@dataclass(frozen=True)
class ExcursionTimes:
    times: tuple[float, ...]
    indices: tuple[int, ...]
    open_after: float | None
    resolution: float

    def gaps(self) -> np.ndarray:
        return np.diff(np.concatenate([[0.0], self.times]))


def excursion_times(record: TrajectoryRecord, max_n: int) -> ExcursionTimes:
    """T_{n+1} = first recorded t > T_n with inf_x u(t) < e^-1 inf_x u(T_n), T_0 = 0.

    A continuous path sits exactly on the level at a passage, so the reference
    for the next passage is the level e^-n inf_x u(0) rather than the sampled
    value; otherwise the one-step lateness would compound. Each time is then
    late by at most one cadence step (unless one step jumps several levels).
    ``open_after`` is the last passage time when fewer than ``max_n`` passages
    occur within the horizon.
    """
    inf = record.inf
    found_t: list[float] = []
    found_i: list[int] = []
    level = inf[0]
    i = 0
    while len(found_t) < max_n:
        if level <= 0:
            break
        level = level / math.e
        later = np.flatnonzero(inf[i + 1:] < level)
        if later.size == 0:
            break
        i = i + 1 + int(later[0])
        found_t.append(float(record.times[i]))
        found_i.append(i)
    open_after = None if len(found_t) >= max_n else (found_t[-1] if found_t else 0.0)
    return ExcursionTimes(tuple(found_t), tuple(found_i), open_after, record.cadence_dt)


# ---------------------------------------------------------------------------
# ensemble functionals

@dataclass(frozen=True)
class LyapunovEstimate:
    k: float
    lower: float
    upper: float
    lower_halfwidth: float
    upper_halfwidth: float
    n: int
    caveat: str = HEAVY_TAIL_CAVEAT


def _moment_slopes(stack: np.ndarray, times: np.ndarray, k: float) -> tuple[float, float]:
    # stack: (n_traj, n_times, n_space); log of the mean, then inf/sup over x
    moments = np.mean(np.abs(stack) ** k, axis=0)
    lower = np.log(moments.min(axis=1))
    upper = np.log(moments.max(axis=1))
    return _slope(times, lower), _slope(times, upper)


def snapshot_stack(records: Sequence[TrajectoryRecord], window: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    times = sorted(t for t in records[0].snapshots if window[0] - 1e-12 <= t <= window[1] + 1e-12)
    if len(times) < 2:
        raise InsufficientEnsembleError(f"need snapshots at >= 2 times inside {window}, have {times}")
    stack = np.stack([np.stack([r.snapshots[t] for t in times]) for r in records])
    return np.asarray(times), stack


def moment_lyapunov_estimate(records: Sequence[TrajectoryRecord], k: float, window: tuple[float, float],
                             n_boot: int = 200, seed: int = 0, min_trajectories: int = 100) -> LyapunovEstimate:
    """Slopes of log inf_x E|u|^k and log sup_x E|u|^k over the window.

    Half-widths are 1.96 bootstrap standard deviations (resampling trajectories).
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(records) < min_trajectories:
        raise InsufficientEnsembleError(f"need >= {min_trajectories} trajectories, got {len(records)}")
    times, stack = snapshot_stack(records, window)
    lower, upper = _moment_slopes(stack, times, k)
    rng = np.random.default_rng(seed)
    n = stack.shape[0]
    boot = np.array([_moment_slopes(stack[rng.integers(0, n, n)], times, k) for _ in range(n_boot)])
    hw = 1.96 * boot.std(axis=0, ddof=1)
    return LyapunovEstimate(k, lower, upper, float(hw[0]), float(hw[1]), n)


def ensemble_matrix(records: Sequence[TrajectoryRecord], which: str) -> np.ndarray:
    """(n_traj, n_times) array of one series; all records must share a time grid."""
    return np.stack([r.series(which) for r in records])


def mean_with_se(values: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=float)
    n = values.shape[axis]
    return values.mean(axis=axis), values.std(axis=axis, ddof=1) / math.sqrt(n)


def proportion_se(p_hat: float, n: int) -> float:
    return math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / n)
