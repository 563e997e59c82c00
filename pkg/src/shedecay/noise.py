"""Discretized space-time white noise on [0, T] x torus.

Cell (i, j) carries W([t_i, t_{i+1}) x [x_j, x_{j+1})), a N(0, dt*dx) variable.
Each trajectory owns a Philox stream keyed by (master_seed, stream_index), so
a trajectory's noise never depends on how many others run or in which order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import TORUS_LENGTH

_MAGIC = b"SHENOISE"
_VERSION = 1
_HEADER = struct.Struct("<8sII QQ dd")


@dataclass(frozen=True)
class RngSeed:
    master_seed: int
    stream_index: int = 0

    def __post_init__(self) -> None:
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if int(self.stream_index) < 0:
            raise ValueError("stream_index must be nonnegative")

    def with_stream(self, stream_index: int) -> "RngSeed":
        return RngSeed(self.master_seed, stream_index)


def stream_generator(seed: RngSeed, purpose: int = 0) -> np.random.Generator:
    """Independent counter-based generator for one (seed, stream, purpose) triple."""
    ss = np.random.SeedSequence(int(seed.master_seed), spawn_key=(int(seed.stream_index), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class NoiseGrid:
    dt: float
    dx: float
    increments: np.ndarray

    def __post_init__(self) -> None:
        inc = np.array(self.increments, dtype=float)
        if inc.ndim != 2:
            raise ValueError("increments must be a 2-d (time, space) array")
        if not (self.dt > 0 and self.dx > 0):
            raise ValueError("dt and dx must be positive")
        if not np.isclose(inc.shape[1] * self.dx, TORUS_LENGTH, rtol=1e-12, atol=0):
            raise ValueError(f"n_space*dx = {inc.shape[1] * self.dx} does not cover the torus")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def n_time(self) -> int:
        return self.increments.shape[0]

    @property
    def n_space(self) -> int:
        return self.increments.shape[1]

    @property
    def horizon(self) -> float:
        return self.n_time * self.dt

    def coarsen(self, factor_time: int = 1, factor_space: int = 1) -> "NoiseGrid":
        """Merge blocks of cells; the W-measure of a union is the sum of its parts."""
        nt, nx = self.increments.shape
        if nt % factor_time or nx % factor_space:
            raise ValueError(f"shape {(nt, nx)} not divisible by factors {(factor_time, factor_space)}")
        blocks = self.increments.reshape(nt // factor_time, factor_time, nx // factor_space, factor_space)
        return NoiseGrid(self.dt * factor_time, self.dx * factor_space, blocks.sum(axis=(1, 3)))

    def scaled(self, factor: float) -> "NoiseGrid":
        return NoiseGrid(self.dt, self.dx, self.increments * factor)

    def save(self, path: str | Path) -> None:
        """Binary dump: fixed header, then little-endian float64 cells, time-major."""
        header = _HEADER.pack(_MAGIC, _VERSION, 0, self.n_time, self.n_space, self.dt, self.dx)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.increments, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "NoiseGrid":
        raw = Path(path).read_bytes()
        magic, version, _, n_time, n_space, dt, dx = _HEADER.unpack_from(raw)
        if magic != _MAGIC or version != _VERSION:
            raise ValueError(f"{path}: not a noise grid file (magic={magic!r}, version={version})")
        body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        if body.size != n_time * n_space:
            raise ValueError(f"{path}: expected {n_time * n_space} cells, found {body.size}")
        return cls(dt, dx, body.reshape(n_time, n_space).astype(float))


def check_shape(dt: float, n_space: int, n_time: int) -> float:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    if n_space < 1 or n_time < 0:
        raise ValueError(f"bad noise shape (n_time={n_time}, n_space={n_space})")
    return TORUS_LENGTH / n_space


def sample_noise(dt: float, n_space: int, n_time: int, seed: RngSeed,
                 refine_time: int = 1, refine_space: int = 1) -> NoiseGrid:
    """Sample a noise grid, optionally on a finer mesh that is then coarsened.

    With refinement factors (r_t, r_x) the realization is drawn on cells of size
    (dt/r_t, dx/r_x) and summed back, so grids at several resolutions built from
    the same seed and the same finest mesh describe the same Brownian sheet.
    """
    check_shape(dt, n_space, n_time)
    fine_dt, fine_nx = dt / refine_time, n_space * refine_space
    fine_dx = TORUS_LENGTH / fine_nx
    gen = stream_generator(seed)
    z = gen.standard_normal((n_time * refine_time, fine_nx))
    z *= np.sqrt(fine_dt * fine_dx)
    grid = NoiseGrid(fine_dt, fine_dx, z)
    if refine_time == 1 and refine_space == 1:
        return grid
    return grid.coarsen(refine_time, refine_space)


class NoiseStream:
    """Chunked reader over one trajectory's noise; rows match ``sample_noise``."""

    def __init__(self, dt: float, n_space: int, seed: RngSeed):
        self.scale = np.sqrt(dt * (TORUS_LENGTH / n_space))
        self.n_space = n_space
        self._gen = stream_generator(seed)

    def next_rows(self, n_rows: int) -> np.ndarray:
        z = self._gen.standard_normal((n_rows, self.n_space))
        z *= self.scale
        return z


def zero_noise(dt: float, n_space: int, n_time: int) -> NoiseGrid:
    dx = check_shape(dt, n_space, n_time)
    return NoiseGrid(dt, dx, np.zeros((n_time, n_space)))
