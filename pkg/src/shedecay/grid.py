"""Uniform grids on the torus [-1, 1) and functions sampled on them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

TORUS_LENGTH = 2.0


def torus_point(x: float | np.ndarray) -> float | np.ndarray:
    """Wrap a coordinate (or array of coordinates) into [-1, 1)."""
    wrapped = np.mod(np.asarray(x, dtype=float) + 1.0, TORUS_LENGTH) - 1.0
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def grid_nodes(n_space: int) -> np.ndarray:
    """Nodes x_j = -1 + j*dx, j = 0..n-1."""
    if n_space < 1:
        raise ValueError(f"n_space must be positive, got {n_space}")
    return -1.0 + np.arange(n_space) * (TORUS_LENGTH / n_space)


@dataclass(frozen=True)
class GridFunction:
    """A snapshot u(t, .) sampled at the nodes of a uniform torus grid.

    ``dx`` is implied by the number of samples: ``len(values) * dx == 2``.
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=float, copy=True)
        if vals.ndim != 1 or vals.size == 0:
            raise ValueError("GridFunction values must be a non-empty 1-d array")
        if not np.all(np.isfinite(vals)):
            bad = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise FloatingPointError(f"non-finite value at cell {bad}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n_space(self) -> int:
        return self.values.size

    @property
    def dx(self) -> float:
        return TORUS_LENGTH / self.values.size

    @property
    def nodes(self) -> np.ndarray:
        return grid_nodes(self.values.size)

    @classmethod
    def from_callable(cls, f: Callable[[np.ndarray], np.ndarray], n_space: int) -> "GridFunction":
        x = grid_nodes(n_space)
        return cls(np.broadcast_to(np.asarray(f(x), dtype=float), x.shape))

    @classmethod
    def constant(cls, value: float, n_space: int) -> "GridFunction":
        return cls(np.full(n_space, float(value)))

    def l1_norm(self) -> float:
        return float(self.dx * np.sum(np.abs(self.values)))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def __len__(self) -> int:
        return self.values.size


def initial_profile(spec: dict, n_space: int) -> GridFunction:
    """Build u0 from a small declarative description.

    Supported kinds: ``constant`` (value), ``cosine`` (mean, amplitude, mode),
    ``bump`` (base, height, center, width).
    """
    kind = spec.get("kind", "constant")
    x = grid_nodes(n_space)
    if kind == "constant":
        vals = np.full(n_space, float(spec.get("value", 1.0)))
    elif kind == "cosine":
        mean = float(spec.get("mean", 1.0))
        amp = float(spec.get("amplitude", 0.5))
        mode = int(spec.get("mode", 1))
        vals = mean + amp * np.cos(mode * np.pi * x)
    elif kind == "bump":
        base = float(spec.get("base", 0.1))
        height = float(spec.get("height", 1.0))
        center = float(spec.get("center", 0.0))
        width = float(spec.get("width", 0.1))
        d = torus_point(x - center)
        vals = base + height * np.exp(-0.5 * (d / width) ** 2)
    else:
        raise ValueError(f"unknown initial profile kind {kind!r}")
    return GridFunction(vals)
