"""Finite-difference Euler-Maruyama solver and a discrete Picard oracle.

The equation is du = nu * u_xx dt + lam * sigma(u) W(dt dx) on the torus
[-1, 1] with n_space cells. The noise term is Ito: sigma is evaluated at the
pre-step value. Trajectories are advanced in fixed-size batches (one row per
trajectory) so that results do not depend on how work is split across
processes.
"""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .grid import TORUS_LENGTH, GridFunction
from .kernel import KernelParams, kernel_row
from .noise import NoiseGrid, NoiseStream, RngSeed
from .observables import TrajectoryRecord
from .sigma import SigmaSpec

SCHEMES = ("explicit_em", "semi_implicit_em")
NEGATIVITY_POLICIES = ("record_only", "clamp_to_zero")
DIFFUSION_COEFFICIENTS = (1.0, 0.5)
BATCH_SIZE = 128
_CHUNK_CELLS = 1 << 21


class StabilityError(ValueError):
    """The explicit scheme's diffusive stability rule dt <= dx^2 / (2 nu) is violated."""


class NumericalFailure(FloatingPointError):
    def __init__(self, time: float, cell: int, stream: int | None = None):
        where = f" (stream {stream})" if stream is not None else ""
        super().__init__(f"non-finite value at t={time:.6g}, cell {cell}{where}")
        self.time = time
        self.cell = cell
        self.stream = stream


class DivergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    n_space: int = 128
    dt: float | None = None
    horizon: float = 1.0
    lam: float = 1.0
    sigma: SigmaSpec = field(default_factory=SigmaSpec)
    seed: RngSeed = field(default_factory=lambda: RngSeed(0))
    scheme: str = "explicit_em"
    negativity_policy: str = "record_only"
    nu: float = 1.0
    output_every: int | None = None
    test_mode: bool = False

    def __post_init__(self) -> None:
        if self.n_space < 3:
            raise ValueError("n_space must be >= 3")
        if self.dt is None:
            object.__setattr__(self, "dt", self.dx ** 2 / 4.0)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.horizon >= 0:
            raise ValueError("horizon must be nonnegative")
        if not self.lam >= 0:
            raise ValueError("lam must be nonnegative")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.negativity_policy not in NEGATIVITY_POLICIES:
            raise ValueError(f"negativity_policy must be one of {NEGATIVITY_POLICIES}")
        if self.nu not in DIFFUSION_COEFFICIENTS:
            raise ValueError(f"nu must be one of {DIFFUSION_COEFFICIENTS}")
        if self.lam < 0 or (self.lam == 0 and not self.test_mode):
            raise ValueError("lam must be > 0 (lam = 0 only with test_mode)")
        if self.scheme == "explicit_em" and self.dt > self.stability_limit * (1 + 1e-12):
            raise StabilityError(
                f"explicit scheme requires dt <= dx^2/(2 nu) = {self.stability_limit:.6g}; got dt = {self.dt:.6g}"
            )
        steps = self.horizon / self.dt
        if self.horizon > 0 and abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            # shrink dt so the horizon is a whole number of steps
            object.__setattr__(self, "dt", self.horizon / math.ceil(steps))
        if self.output_every is not None and self.output_every < 1:
            raise ValueError("output_every must be >= 1")

    @property
    def dx(self) -> float:
        return TORUS_LENGTH / self.n_space

    @property
    def stability_limit(self) -> float:
        return self.dx ** 2 / (2.0 * self.nu)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def cadence(self) -> int:
        if self.output_every is not None:
            return self.output_every
        return max(1, math.ceil(0.01 / self.dt - 1e-9))

    def to_dict(self) -> dict:
        return {
            "n_space": self.n_space,
            "dt": self.dt,
            "horizon": self.horizon,
            "lambda": self.lam,
            "sigma": self.sigma.to_dict(),
            "seed": self.seed.master_seed,
            "scheme": self.scheme,
            "negativity_policy": self.negativity_policy,
            "nu": self.nu,
            "output_every": self.cadence,
            "test_mode": self.test_mode,
        }

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_(self, **changes) -> "SolverConfig":
        return replace(self, **changes)


@dataclass
class TrajectoryState:
    time: float
    u: GridFunction
    negativity_events: int = 0
    step_index: int = 0


# ---------------------------------------------------------------------------
# one step, batched over trajectories (rows)

def _symbol(config: SolverConfig) -> np.ndarray:
    """Denominator of the implicit Laplacian solve in rfft space."""
    k = np.arange(config.n_space // 2 + 1)
    eig = (4.0 / config.dx ** 2) * np.sin(np.pi * k / config.n_space) ** 2
    return 1.0 + config.dt * config.nu * eig


def _advance(u: np.ndarray, dw: np.ndarray, config: SolverConfig, symbol: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """One step for a (batch, n_space) array; returns (u_new, lam * sum_j sigma(u_j) dW_j)."""
    noise_term = config.lam * config.sigma(u) * dw
    increment = noise_term.sum(axis=1)
    if config.scheme == "explicit_em":
        coef = config.nu * config.dt / config.dx ** 2
        lap = np.empty_like(u)
        lap[:, 1:-1] = u[:, 2:] + u[:, :-2]
        lap[:, 0] = u[:, 1] + u[:, -1]
        lap[:, -1] = u[:, 0] + u[:, -2]
        lap -= 2.0 * u
        u_new = u + coef * lap + noise_term / config.dx
    else:
        rhs = u + noise_term / config.dx
        u_new = np.fft.irfft(np.fft.rfft(rhs, axis=1) / symbol, n=config.n_space, axis=1)
    return u_new, increment


def step(state: TrajectoryState, noise_row: np.ndarray, config: SolverConfig) -> TrajectoryState:
    """Advance one trajectory by dt using one time-slice of the noise grid."""
    row = np.asarray(noise_row, dtype=float)
    if row.shape != (config.n_space,) or state.u.n_space != config.n_space:
        raise ValueError(f"shape mismatch: noise {row.shape}, u {state.u.n_space}, n_space {config.n_space}")
    symbol = _symbol(config) if config.scheme == "semi_implicit_em" else None
    u_new, _ = _advance(state.u.values[None, :], row[None, :], config, symbol)
    u_new = u_new[0]
    new_time = (state.step_index + 1) * config.dt
    if not np.all(np.isfinite(u_new)):
        raise NumericalFailure(new_time, int(np.flatnonzero(~np.isfinite(u_new))[0]))
    neg = int(np.count_nonzero(u_new < 0))
    if neg and config.negativity_policy == "clamp_to_zero":
        u_new = np.maximum(u_new, 0.0)
    return TrajectoryState(new_time, GridFunction(u_new), state.negativity_events + neg, state.step_index + 1)


# ---------------------------------------------------------------------------
# trajectories

class _NoiseSource:
    """Rows of noise for a batch: either per-trajectory streams or given grids."""

    def __init__(self, config: SolverConfig, streams: Sequence[int], grids: Sequence[NoiseGrid] | None):
        self.grids = grids
        self.pos = 0
        if grids is None:
            self.readers = [NoiseStream(config.dt, config.n_space, config.seed.with_stream(s)) for s in streams]
        else:
            for g in grids:
                if g.n_space != config.n_space or not math.isclose(g.dt, config.dt, rel_tol=1e-12):
                    raise ValueError(f"noise grid (dt={g.dt}, n_space={g.n_space}) does not match config")
                if g.n_time < config.n_steps:
                    raise ValueError(f"noise grid covers {g.n_time} steps, need {config.n_steps}")

    def next(self, n_rows: int) -> np.ndarray:
        """(n_rows, batch, n_space) block."""
        if self.grids is None:
            block = np.stack([r.next_rows(n_rows) for r in self.readers], axis=1)
        else:
            block = np.stack([g.increments[self.pos:self.pos + n_rows] for g in self.grids], axis=1)
        self.pos += n_rows
        return block


def _snapshot_steps(config: SolverConfig, times: Iterable[float]) -> dict[int, float]:
    out = {}
    for t in times:
        k = int(round(t / config.dt))
        if k < 0 or k > config.n_steps:
            raise ValueError(f"snapshot time {t} outside [0, {config.horizon}]")
        out[k] = t
    return out


def simulate_batch(u0: GridFunction, config: SolverConfig, streams: Sequence[int],
                   noise: Sequence[NoiseGrid] | None = None,
                   snapshot_times: Iterable[float] = ()) -> list[TrajectoryRecord]:
    """Run len(streams) trajectories side by side; one record per trajectory."""
    if u0.n_space != config.n_space:
        raise ValueError(f"u0 has {u0.n_space} cells, config expects {config.n_space}")
    batch = len(streams)
    n, dx, dt = config.n_space, config.dx, config.dt
    n_steps, cadence = config.n_steps, config.cadence
    record_steps = list(range(0, n_steps + 1, cadence))
    if record_steps[-1] != n_steps:
        record_steps.append(n_steps)
    snaps = _snapshot_steps(config, snapshot_times)
    symbol = _symbol(config) if config.scheme == "semi_implicit_em" else None
    source = _NoiseSource(config, streams, noise)

    n_rec = len(record_steps)
    out = {name: np.empty((batch, n_rec)) for name in ("mass", "sup", "inf", "qv", "min_inf", "mart")}
    out_neg = np.empty((batch, n_rec), dtype=np.int64)
    snap_store: dict[float, np.ndarray] = {}

    u = np.tile(u0.values, (batch, 1))
    mass = dx * u.sum(axis=1)
    qv = np.zeros(batch)
    mart = np.zeros(batch)
    mart_comp = np.zeros(batch)  # Kahan compensation for the running noise sum
    neg = np.zeros(batch, dtype=np.int64)
    min_inf = u.min(axis=1)

    def record(slot: int) -> None:
        out["mass"][:, slot] = mass
        out["sup"][:, slot] = u.max(axis=1)
        out["inf"][:, slot] = u.min(axis=1)
        out["qv"][:, slot] = qv
        out["min_inf"][:, slot] = min_inf
        out["mart"][:, slot] = mart
        out_neg[:, slot] = neg

    record(0)
    if 0 in snaps:
        snap_store[snaps[0]] = u.copy()
    slot = 1
    chunk = max(1, min(n_steps, _CHUNK_CELLS // max(1, batch * n)))
    k = 0
    while k < n_steps:
        rows = min(chunk, n_steps - k)
        block = source.next(rows)
        for r in range(rows):
            u_new, increment = _advance(u, block[r], config, symbol)
            new_mass = dx * u_new.sum(axis=1)
            if not np.all(np.isfinite(new_mass)):
                b = int(np.flatnonzero(~np.isfinite(new_mass))[0])
                cell = int(np.flatnonzero(~np.isfinite(u_new[b]))[0])
                raise NumericalFailure((k + r + 1) * dt, cell, streams[b])
            negative = u_new < 0
            n_neg = negative.sum(axis=1)
            if n_neg.any():
                neg += n_neg
                if config.negativity_policy == "clamp_to_zero":
                    np.maximum(u_new, 0.0, out=u_new)
                    new_mass = dx * u_new.sum(axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(mass > 0, (new_mass - mass) / mass, 0.0)
            qv += rel * rel
            y = increment - mart_comp
            tot = mart + y
            mart_comp = (tot - mart) - y
            mart = tot
            u, mass = u_new, new_mass
            np.minimum(min_inf, u.min(axis=1), out=min_inf)
            step_no = k + r + 1
            if slot < n_rec and step_no == record_steps[slot]:
                record(slot)
                slot += 1
            if step_no in snaps:
                snap_store[snaps[step_no]] = u.copy()
        k += rows

    times = np.asarray(record_steps, dtype=float) * dt
    digest = config.digest()
    cadence_dt = cadence * dt
    return [
        TrajectoryRecord(
            times=times.copy(), mass=out["mass"][b], sup=out["sup"][b], inf=out["inf"][b],
            qv_n=out["qv"][b], negativity=out_neg[b], min_inf=out["min_inf"][b], martingale=out["mart"][b],
            stream=int(streams[b]), seed=int(config.seed.master_seed), config_digest=digest,
            lam=config.lam, nu=config.nu, cadence_dt=cadence_dt, test_mode=config.test_mode,
            snapshots={t: v[b].copy() for t, v in snap_store.items()},
        )
        for b in range(batch)
    ]


def run_trajectory(u0: GridFunction, config: SolverConfig, noise: NoiseGrid | None = None,
                   snapshot_times: Iterable[float] = ()) -> TrajectoryRecord:
    """Simulate one trajectory (stream ``config.seed.stream_index`` unless noise is given)."""
    _check_initial(u0)
    grids = None if noise is None else [noise]
    return simulate_batch(u0, config, [config.seed.stream_index], grids, snapshot_times)[0]


def final_state(u0: GridFunction, config: SolverConfig, noise: NoiseGrid | None = None) -> GridFunction:
    """u(T, .) for one trajectory."""
    rec = run_trajectory(u0, config, noise, snapshot_times=[config.horizon])
    return GridFunction(rec.snapshots[config.horizon])


def _check_initial(u0: GridFunction) -> None:
    if not np.all(u0.values > 0):
        raise ValueError("initial profile must be strictly positive")


def _batch_job(args) -> list[TrajectoryRecord]:
    u0, config, streams, snapshot_times = args
    return simulate_batch(u0, config, streams, None, snapshot_times)


def run_ensemble(u0: GridFunction, config: SolverConfig, n_trajectories: int, workers: int = 1,
                 first_stream: int = 0, snapshot_times: Iterable[float] = (),
                 batch_size: int = BATCH_SIZE) -> list[TrajectoryRecord]:
    """Independent trajectories on streams first_stream .. first_stream+n-1, in stream order.

    Batches are fixed blocks of ``batch_size`` consecutive streams, so the
    output is identical for any worker count.
    """
    _check_initial(u0)
    snapshot_times = tuple(snapshot_times)
    streams = list(range(first_stream, first_stream + n_trajectories))
    jobs = [(u0, config, streams[i:i + batch_size], snapshot_times) for i in range(0, len(streams), batch_size)]
    if workers <= 1 or len(jobs) == 1:
        parts = [_batch_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_batch_job, jobs))
    return [rec for part in parts for rec in part]


# ---------------------------------------------------------------------------
# Picard iteration on the mild form

@dataclass(frozen=True)
class PicardResult:
    iterate: GridFunction
    fields: tuple[np.ndarray, ...]
    successive_sup_distance: tuple[float, ...]


def picard_iterates(u0: GridFunction, noise: NoiseGrid, config: SolverConfig, n_iter: int, t_eval: float,
                    kernel_params: KernelParams | None = None, ceiling: float | None = None) -> PicardResult:
    """Discrete Picard scheme for u = P_t u0 + lam int p_{t-s}(x, y) sigma(u(s, y)) W(ds dy).

    Space-time fields live on the times s_m = m dt, m = 0..K with K dt = t_eval;
    the stochastic integral is the left-point sum over cells s_m < t. Iterate 0
    is u0 at every time. Spatial convolutions with the periodic kernel are
    circulant and done in rfft space.
    """
    if n_iter < 0:
        raise ValueError("n_iter must be >= 0")
    n = config.n_space
    if u0.n_space != n or noise.n_space != n:
        raise ValueError("u0, noise and config must share n_space")
    if not math.isclose(noise.dt, config.dt, rel_tol=1e-12):
        raise ValueError(f"noise dt {noise.dt} differs from config dt {config.dt}")
    K = int(round(t_eval / config.dt))
    if K < 1 or abs(K * config.dt - t_eval) > 1e-9 * max(1.0, t_eval):
        raise ValueError(f"t_eval={t_eval} must be a positive multiple of dt={config.dt}")
    if noise.n_time < K:
        raise ValueError(f"noise covers {noise.n_time} steps, need {K}")
    ceiling = ceiling if ceiling is not None else 1e6 * max(1.0, u0.sup_norm())

    dW = np.asarray(noise.increments[:K])
    # kernel rows at lags 1..K (row 0 unused)
    rows = np.zeros((K + 1, n))
    for lag in range(1, K + 1):
        rows[lag] = kernel_row(config.nu * lag * config.dt, n, kernel_params)  # kernel of d_t - nu d_xx
    rows_hat = np.fft.rfft(rows, axis=1)
    u0_hat = np.fft.rfft(u0.values)
    free = np.empty((K + 1, n))
    free[0] = u0.values
    free[1:] = np.fft.irfft(rows_hat[1:] * u0_hat * config.dx, n=n, axis=1)

    field_prev = np.tile(u0.values, (K + 1, 1))
    fields = [field_prev]
    distances = []
    for _ in range(n_iter):
        f_hat = np.fft.rfft(config.lam * config.sigma(field_prev[:K]) * dW, axis=1)
        conv = np.zeros((K + 1, rows_hat.shape[1]), dtype=complex)
        for k in range(1, K + 1):
            conv[k] = np.einsum("mf,mf->f", rows_hat[k:0:-1], f_hat[:k])
        field_next = free + np.fft.irfft(conv, n=n, axis=1)
        if not np.all(np.isfinite(field_next)) or np.max(np.abs(field_next)) > ceiling:
            raise DivergenceError(f"Picard iterate {len(fields)} exceeds ceiling {ceiling:g}")
        distances.append(float(np.max(np.abs(field_next - field_prev))))
        fields.append(field_next)
        field_prev = field_next
    return PicardResult(GridFunction(field_prev[K]), tuple(fields), tuple(distances))


def picard_solve(u0: GridFunction, noise: NoiseGrid, config: SolverConfig, n_iter: int, t_eval: float,
                 kernel_params: KernelParams | None = None, ceiling: float | None = None) -> GridFunction:
    """The n_iter-th Picard iterate evaluated at t_eval."""
    if n_iter == 0:
        return u0
    return picard_iterates(u0, noise, config, n_iter, t_eval, kernel_params, ceiling).iterate


def picard_tolerance(dx: float, dt: float, constant: float = 1.0) -> float:
    """Agreement tolerance constant * (dx^(1/2) + dt^(1/4)) between Picard and the direct scheme."""
    return constant * (math.sqrt(dx) + dt ** 0.25)
