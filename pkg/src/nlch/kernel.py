"""Interaction kernels and the fast nonlocal operator.

The trapezoid discretization of ``(J * v)`` on an ``(M+1) x (M+1)`` grid is a
block Toeplitz matrix with Toeplitz blocks acting on ``w * v``.  Zero padding
to a ``P x P`` image with ``P >= 2M+1`` turns it into a block circulant
matrix with circulant blocks, which the 2D DFT diagonalizes, so one product
costs two real FFTs of size ``P x P``.  The transforms are pruned: rows that
are all padding, or whose output is discarded, are never transformed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import scipy.fft as sfft

from .grid import Grid, GridError


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class Gaussian:
    """``J(x) = 4 / (pi delta^4) exp(-|x|^2 / delta^2)`` in two dimensions."""

    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise KernelError(f"Gaussian width must be positive, got {self.delta!r}")


@dataclass(frozen=True)
class Tabulated:
    """Samples ``x[i, j] = J(i h, j h)`` at non-negative offsets."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.array(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise KernelError(f"kernel table must be square, got shape {s.shape}")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise KernelError("kernel samples must be finite and non-negative")
        s.flags.writeable = False
        object.__setattr__(self, "samples", s)


KernelSpec = Union[Gaussian, Tabulated]


def eval_kernel(spec: KernelSpec, dx, dy):
    if isinstance(spec, Gaussian):
        d2 = spec.delta**2
        return 4.0 / (np.pi * d2 * d2) * np.exp(-(np.square(dx) + np.square(dy)) / d2)
    raise KernelError(f"cannot evaluate {type(spec).__name__} kernel off the grid")


def sample_kernel(grid: Grid, spec: KernelSpec) -> np.ndarray:
    """Return the table ``x[i, j] = J(i h, j h)`` for ``i, j = 0..M``."""
    if isinstance(spec, Tabulated):
        if spec.samples.shape != grid.shape:
            raise KernelError(
                f"kernel table has shape {spec.samples.shape}, grid needs {grid.shape}"
            )
        return np.array(spec.samples)
    off = grid.h * np.arange(grid.n)
    return eval_kernel(spec, off[:, None], off[None, :])


def read_kernel_table(path) -> Tabulated:
    """Read a table file: a line with ``M`` then ``M+1`` rows of ``M+1`` values."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise KernelError(f"{path}: empty kernel table")
    try:
        M = int(lines[0])
    except ValueError:
        raise KernelError(f"{path}: first line must be the integer M") from None
    rows = [ln.split() for ln in lines[1:]]
    if len(rows) != M + 1 or any(len(r) != M + 1 for r in rows):
        raise KernelError(f"{path}: expected {M + 1} rows of {M + 1} values")
    return Tabulated(np.array(rows, dtype=float))


def write_kernel_table(path, table: np.ndarray) -> None:
    table = np.asarray(table, dtype=float)
    M = table.shape[0] - 1
    with open(path, "w") as fh:
        fh.write(f"{M}\n")
        for row in table:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def wrap_kernel(table: np.ndarray, P: int) -> np.ndarray:
    """Wrapped ``P x P`` kernel image in field layout (rows are y offsets).

    ``c[q, p] = x[iota(p), iota(q)]`` with ``iota(p) = p`` for ``p <= M``,
    ``P - p`` for ``p >= P - M`` and zero in between.
    """
    M = table.shape[0] - 1
    if P < 2 * M + 1:
        raise KernelError(f"embedding size P={P} is below the minimum 2M+1={2 * M + 1}")
    idx = np.full(P, -1)
    idx[: M + 1] = np.arange(M + 1)
    idx[P - M:] = P - np.arange(P - M, P)
    c = np.zeros((P, P))
    valid = idx >= 0
    # table is indexed [x offset, y offset]; the image is [y, x]
    c[np.ix_(valid, valid)] = table.T[np.ix_(idx[valid], idx[valid])]
    return c


@dataclass(frozen=True, eq=False)
class ConvolutionPlan:
    """Precomputed FFT symbol of the embedded kernel for one grid.

    The plan is read-only after construction; every call allocates its own
    work buffers, so one plan may be shared between threads.
    """

    grid: Grid
    table: np.ndarray
    P: int
    symbol: np.ndarray       # complex P x P, fft2 of the wrapped image
    half_symbol: np.ndarray  # real P x (P//2 + 1), used with rfft2
    jstar1: np.ndarray       # (J * 1) at every node

    @property
    def normalization(self) -> str:
        # scipy's backward normalization: ifft(fft(x)) == x
        return "backward"


def build_plan(
    grid: Grid,
    table: np.ndarray,
    P: int | None = None,
    fast_size: bool = False,
) -> ConvolutionPlan:
    """Embed the kernel table and precompute its spectrum.

    ``P`` defaults to ``2M + 2``.  With ``fast_size`` the size is rounded up
    to the next length with only small prime factors, which can be several
    times faster (e.g. 514 -> 540).
    """
    table = np.array(table, dtype=float)
    if table.shape != grid.shape:
        raise KernelError(f"kernel table shape {table.shape} does not match grid {grid.shape}")
    if P is None:
        P = 2 * grid.M + 2
    P = int(P)
    if P < 2 * grid.M + 1:
        raise KernelError(f"embedding size P={P} is below the minimum 2M+1={2 * grid.M + 1}")
    if fast_size:
        P = sfft.next_fast_len(P, real=True)

    image = wrap_kernel(table, P)
    symbol = sfft.fft2(image)
    scale = np.max(np.abs(symbol))
    if scale > 0 and np.max(np.abs(symbol.imag)) > 1e-12 * scale:
        raise KernelError("kernel image is not centro-symmetric; spectrum is not real")
    half = np.ascontiguousarray(symbol[:, : P // 2 + 1].real)

    for arr in (table, symbol, half):
        arr.flags.writeable = False
    plan = ConvolutionPlan(grid, table, P, symbol, half, np.empty(0))
    jstar1 = _convolve(plan, np.ones(grid.shape))
    jstar1.flags.writeable = False
    object.__setattr__(plan, "jstar1", jstar1)
    return plan


def plan_for(grid: Grid, spec: KernelSpec, P: int | None = None, fast_size: bool = True):
    return build_plan(grid, sample_kernel(grid, spec), P=P, fast_size=fast_size)


def _convolve(plan: ConvolutionPlan, v: np.ndarray) -> np.ndarray:
    # Separable transform that skips the zero padding on the way in and the
    # discarded rows on the way out: only n of the P rows are transformed.
    grid = plan.grid
    P = plan.P
    n = grid.n
    spec = sfft.rfft(v * grid.weights, n=P, axis=-1)
    spec = sfft.fft(spec, n=P, axis=-2, overwrite_x=True)
    spec *= plan.half_symbol
    spec = sfft.ifft(spec, axis=-2, overwrite_x=True)[..., :n, :]
    out = sfft.irfft(spec, n=P, axis=-1)[..., :n]
    return grid.h**2 * out


def _check_batch(plan: ConvolutionPlan, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape[-2:] != plan.grid.shape:
        raise GridError(f"field of shape {v.shape} does not live on grid {plan.grid.shape}")
    return v


def conv_apply(plan: ConvolutionPlan, v: np.ndarray) -> np.ndarray:
    """Trapezoid convolution ``(J * v)``; leading batch axes are allowed."""
    return _convolve(plan, _check_batch(plan, v))


def apply_Lh(plan: ConvolutionPlan, v: np.ndarray) -> np.ndarray:
    """Discrete nonlocal operator ``(J*1) v - (J*v)``."""
    v = _check_batch(plan, v)
    return plan.jstar1 * v - _convolve(plan, v)


def apply_A(plan: ConvolutionPlan, v: np.ndarray, c: float) -> np.ndarray:
    """Stiffness operator ``v + c L_h(L_h v)``."""
    if c < 0:
        raise ValueError(f"stiffness coefficient must be non-negative, got {c!r}")
    v = _check_batch(plan, v)
    if c == 0:
        return v.copy()
    return v + c * apply_Lh(plan, apply_Lh(plan, v))


# --- dense oracles ----------------------------------------------------------

def dense_conv(grid: Grid, table: np.ndarray, v: np.ndarray) -> np.ndarray:
    """O(N^2) trapezoid double sum, written out node by node.

    Interior source nodes carry weight 1, edge nodes 1/2 and the four
    corners 1/4.  Used only as an oracle on small grids.
    """
    v = grid.check(v)
    table = np.asarray(table, dtype=float)
    M = grid.M
    m = np.arange(M + 1)
    inner = slice(1, M)
    out = np.empty(grid.shape)
    for j in range(M + 1):
        for i in range(M + 1):
            # Jm[m2, m1] = J(x_m1 - x_i, y_m2 - y_j)
            Jm = table[np.abs(m - i)[None, :], np.abs(m - j)[:, None]]
            prod = Jm * v
            s = prod[inner, inner].sum()
            s += 0.5 * (prod[0, inner].sum() + prod[M, inner].sum())
            s += 0.5 * (prod[inner, 0].sum() + prod[inner, M].sum())
            s += 0.25 * (prod[0, 0] + prod[0, M] + prod[M, 0] + prod[M, M])
            out[j, i] = grid.h**2 * s
    return out


def dense_kernel_matrix(grid: Grid, table: np.ndarray) -> np.ndarray:
    """``K[a, b] = J(x_b - x_a)`` over flattened nodes (i fastest)."""
    n = grid.n
    jj, ii = np.divmod(np.arange(n * n), n)
    di = np.abs(ii[:, None] - ii[None, :])
    dj = np.abs(jj[:, None] - jj[None, :])
    return np.asarray(table)[di, dj]


def dense_Lh_matrix(grid: Grid, table: np.ndarray) -> np.ndarray:
    """Dense ``L_h`` assembled directly from kernel samples."""
    K = dense_kernel_matrix(grid, table)
    wh2 = grid.h**2 * grid.weights.ravel()
    KW = K * wh2[None, :]
    return np.diag(KW.sum(axis=1)) - KW
