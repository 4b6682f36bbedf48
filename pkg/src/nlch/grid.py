"""Uniform square grids, trapezoid quadrature and initial conditions.

Grid functions are plain ``numpy`` arrays of shape ``(M+1, M+1)``.  Row ``j``
holds the nodes with ``y = y_j`` and column ``i`` the nodes with ``x = x_i``,
so ``field[j, i]`` is the value at ``(x_i, y_j)`` and a C-order ravel walks
``i`` fastest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class GridError(ValueError):
    """Invalid grid configuration or mismatched grid functions."""


@dataclass(frozen=True)
class Grid:
    """Uniform mesh of the square ``(-L, L)^2`` with ``M`` cells per side."""

    L: float
    M: int
    h: float = field(init=False)

    def __post_init__(self):
        if not isinstance(self.M, (int, np.integer)) or self.M < 2:
            raise GridError(f"grid needs M >= 2 cells per side, got {self.M!r}")
        if not self.L > 0:
            raise GridError(f"half width L must be positive, got {self.L!r}")
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "L", float(self.L))
        object.__setattr__(self, "h", 2.0 * self.L / self.M)

    @property
    def n(self) -> int:
        """Nodes per dimension."""
        return self.M + 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.M + 1, self.M + 1)

    @property
    def size(self) -> int:
        return (self.M + 1) ** 2

    @property
    def area(self) -> float:
        return (2.0 * self.L) ** 2

    @property
    def nodes(self) -> np.ndarray:
        """1D node coordinates ``-L + i h``."""
        return -self.L + self.h * np.arange(self.M + 1)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` with ``X[j, i] = x_i`` and ``Y[j, i] = y_j``."""
        x = self.nodes
        return np.meshgrid(x, x, indexing="xy")

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid weights: 1 inside, 1/2 on edges, 1/4 at corners."""
        return _trapezoid_weights(self.M)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def ones(self) -> np.ndarray:
        return np.ones(self.shape)

    def check(self, u: np.ndarray, name: str = "field") -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != self.shape:
            raise GridError(f"{name} has shape {u.shape}, grid expects {self.shape}")
        return u

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return weighted_inner(self, u, v)

    def norm(self, u: np.ndarray) -> float:
        return weighted_norm(self, u)

    def integrate(self, f: np.ndarray) -> float:
        return quadrature(self, f)


def make_grid(L: float, M: int) -> Grid:
    return Grid(L=L, M=M)


_WEIGHT_CACHE: dict[int, np.ndarray] = {}


def _trapezoid_weights(M: int) -> np.ndarray:
    w = _WEIGHT_CACHE.get(M)
    if w is None:
        w1 = np.ones(M + 1)
        w1[0] = w1[-1] = 0.5
        w = np.outer(w1, w1)
        w.flags.writeable = False
        _WEIGHT_CACHE[M] = w
    return w


def weighted_inner(grid: Grid, u: np.ndarray, v: np.ndarray) -> float:
    """Trapezoid inner product ``h^2 sum_ij w_ij u_ij v_ij``.

    The pointwise product ``u * v`` is formed before weighting, so swapping
    the arguments gives a bitwise identical result.
    """
    u = grid.check(u, "u")
    v = grid.check(v, "v")
    return float(grid.h**2 * np.sum(grid.weights * (u * v)))


def weighted_norm(grid: Grid, u: np.ndarray) -> float:
    return float(np.sqrt(weighted_inner(grid, u, u)))


def quadrature(grid: Grid, f: np.ndarray) -> float:
    """Trapezoid approximation of the integral of ``f`` over the domain."""
    f = grid.check(f, "integrand")
    return float(grid.h**2 * np.sum(grid.weights * f))


def l2_distance(grid: Grid, u: np.ndarray, v: np.ndarray) -> float:
    return weighted_norm(grid, np.asarray(u) - np.asarray(v))


@dataclass(frozen=True)
class Potential:
    """Bulk energy density ``F`` together with its derivative."""

    F: Callable[[np.ndarray], np.ndarray]
    dF: Callable[[np.ndarray], np.ndarray]
    name: str = "custom"


def _double_well(y):
    return 0.25 * (y * y - 1.0) ** 2


def _double_well_prime(y):
    return y * y * y - y


DOUBLE_WELL = Potential(F=_double_well, dF=_double_well_prime, name="double-well")


# --- initial conditions -----------------------------------------------------

def init_example1(grid: Grid) -> np.ndarray:
    X, Y = grid.mesh()
    return 0.5 * np.sin(np.pi * X) * np.sin(np.pi * Y) + 0.1


def init_example2(
    grid: Grid,
    R0: float = 0.36,
    centers: Sequence[tuple[float, float]] = ((0.4, 0.0), (-0.4, 0.0)),
    epsilon: float = 0.02,
) -> np.ndarray:
    """Two touching bubbles of radius ``R0`` with tanh interfaces."""
    X, Y = grid.mesh()
    phi = np.ones(grid.shape)
    for cx, cy in centers:
        if abs(cx) > grid.L or abs(cy) > grid.L:
            raise GridError(f"bubble center ({cx}, {cy}) lies outside the domain")
        dist = np.hypot(X - cx, Y - cy)
        phi -= np.tanh((dist - R0) / (np.sqrt(2.0) * epsilon))
    return phi


def init_example3(grid: Grid, amplitude: float = 0.1, seed: int = 0) -> np.ndarray:
    """Seeded uniform noise in ``[-amplitude, amplitude]`` shifted to zero mean."""
    if not amplitude > 0:
        raise ValueError(f"amplitude must be positive, got {amplitude!r}")
    rng = np.random.default_rng(seed)
    phi = rng.uniform(-amplitude, amplitude, size=grid.shape)
    phi -= phi.mean()
    return phi
