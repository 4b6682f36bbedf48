"""Conjugate gradients in the trapezoid inner product, plus a dense baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.fft as sfft
import scipy.linalg as sla

from .grid import Grid
from .kernel import ConvolutionPlan, apply_A, apply_Lh

DENSE_SIZE_GUARD = 20000
PRECONDITIONERS = ("cosine", "none")


class SolverError(RuntimeError):
    """A linear solve failed."""


class CgBreakdown(SolverError):
    """``d . A d <= 0``: the operator is not positive definite."""


class CgNotConverged(SolverError):
    pass


class DenseTooLarge(SolverError):
    """Dense assembly refused above the size guard."""


@dataclass(frozen=True)
class CgConfig:
    tol_rel: float = 1e-10
    max_iter: int = 2000
    record_history: bool = False
    euclidean: bool = False  # plain dot products, as in textbook CG
    preconditioner: str = "none"  # "cosine" is an opt-in extra, see CosinePreconditioner

    def __post_init__(self):
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(
                f"preconditioner must be one of {PRECONDITIONERS}, got {self.preconditioner!r}"
            )
        if not 0 < self.tol_rel < 1:
            raise ValueError(f"tol_rel must lie in (0, 1), got {self.tol_rel!r}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter!r}")


@dataclass
class CgReport:
    iterations: int
    final_rel_residual: float
    converged: bool
    history: list[float] = field(default_factory=list)


def _euclidean(u, v):
    return float(np.vdot(u, v))


def cg_solve(
    apply: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    x0: np.ndarray | None = None,
    cfg: CgConfig = CgConfig(),
    inner: Callable[[np.ndarray, np.ndarray], float] | None = None,
    precond: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, CgReport]:
    """Solve ``apply(x) = b`` for a self-adjoint positive definite operator.

    Convergence is declared when ``||b - apply(x)|| / ||b|| <= cfg.tol_rel``
    in the norm induced by ``inner``.  Pass ``grid.inner`` to run CG in the
    trapezoid inner product, in which ``I + c L_h^2`` is symmetric.
    ``precond`` applies an approximate inverse that must be self-adjoint and
    positive definite in the same inner product.  Without it the residual
    norm is what CG minimizes; with it the residual need not decrease
    monotonically.
    """
    if inner is None or cfg.euclidean:
        inner = _euclidean
    b = np.asarray(b, dtype=float)
    bnorm = np.sqrt(inner(b, b))
    if bnorm == 0.0:
        return np.zeros_like(b), CgReport(0, 0.0, True, [0.0] if cfg.record_history else [])

    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = np.array(x0, dtype=float)
        r = b - apply(x)
    rel = np.sqrt(max(inner(r, r), 0.0)) / bnorm
    history = [rel] if cfg.record_history else []
    if rel <= cfg.tol_rel:
        return x, CgReport(0, rel, True, history)

    z = r if precond is None else precond(r)
    rz = inner(r, z)
    d = z.copy()
    it = 0
    while it < cfg.max_iter:
        it += 1
        Ad = apply(d)
        dAd = inner(d, Ad)
        if dAd <= 0.0:
            raise CgBreakdown(
                f"CG breakdown at iteration {it}: d.Ad = {dAd:.3e} (operator not positive definite)"
            )
        alpha = rz / dAd
        x += alpha * d
        r -= alpha * Ad
        rr = inner(r, r)
        rel = np.sqrt(max(rr, 0.0)) / bnorm
        if cfg.record_history:
            history.append(rel)
        if rel <= cfg.tol_rel:
            return x, CgReport(it, rel, True, history)
        if precond is None:
            rz_new = rr
            z = r
        else:
            z = precond(r)
            rz_new = inner(r, z)
        d *= rz_new / rz
        d += z
        rz = rz_new
    return x, CgReport(it, rel, False, history)


class CosinePreconditioner:
    """Exact inverse of ``I + c L_r^2`` where ``L_r`` reflects the field at the walls.

    ``L_r`` uses the even extension of the field instead of truncating the
    kernel at the boundary, so it agrees with ``L_h`` away from a layer of
    kernel width and is diagonalized by the type-I cosine transform.  The
    transform is orthogonal in the trapezoid inner product, which makes the
    inverse self-adjoint there and safe to use inside weighted CG.
    """

    def __init__(self, plan: ConvolutionPlan, c: float):
        h = plan.grid.h
        # table is [x offset, y offset]; fields are [y, x]
        eig = sfft.dctn(np.asarray(plan.table).T, type=1) * h * h
        mu = eig[0, 0] - eig
        self.c = c
        self.denominator = 1.0 + c * mu * mu

    def __call__(self, r: np.ndarray) -> np.ndarray:
        return sfft.idctn(sfft.dctn(r, type=1) / self.denominator, type=1)


def assemble_Lh(plan: ConvolutionPlan, chunk: int = 512) -> np.ndarray:
    """Dense ``L_h`` built column by column from ``apply_Lh`` on unit vectors."""
    grid = plan.grid
    N = grid.size
    if N > DENSE_SIZE_GUARD:
        raise DenseTooLarge(f"dense assembly refused: N={N} exceeds guard {DENSE_SIZE_GUARD}")
    L = np.empty((N, N))
    for start in range(0, N, chunk):
        stop = min(start + chunk, N)
        units = np.zeros((stop - start, N))
        units[np.arange(stop - start), np.arange(start, stop)] = 1.0
        cols = apply_Lh(plan, units.reshape(-1, *grid.shape))
        L[:, start:stop] = cols.reshape(stop - start, N).T
    return L


def assemble_A(plan: ConvolutionPlan, c: float) -> np.ndarray:
    L = assemble_Lh(plan)
    A = c * (L @ L)
    A[np.diag_indices_from(A)] += 1.0
    return A


class DirectSolver:
    """LU factorization of the dense stiffness matrix, reused across solves."""

    def __init__(self, plan: ConvolutionPlan, c: float):
        A = assemble_A(plan, c)
        self.grid = plan.grid
        self.c = c
        try:
            self._lu = sla.lu_factor(A, overwrite_a=True, check_finite=False)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"dense factorization failed: {exc}") from exc
        if np.any(np.diag(self._lu[0]) == 0):
            raise SolverError("stiffness matrix is singular (negative coefficient?)")

    def solve(self, b: np.ndarray, x0: np.ndarray | None = None) -> tuple[np.ndarray, int]:
        x = sla.lu_solve(self._lu, np.ravel(b), check_finite=False)
        return x.reshape(self.grid.shape), 0


class FastSolver:
    """Matrix-free CG on ``I + c L_h^2`` using the FFT plan."""

    def __init__(self, plan: ConvolutionPlan, c: float, cfg: CgConfig = CgConfig()):
        if c < 0:
            raise ValueError(f"stiffness coefficient must be non-negative, got {c!r}")
        self.plan = plan
        self.grid = plan.grid
        self.c = c
        self.cfg = cfg
        self.last_report: CgReport | None = None
        self.precond = None
        if cfg.preconditioner == "cosine" and c > 0 and not cfg.euclidean:
            self.precond = CosinePreconditioner(plan, c)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return apply_A(self.plan, v, self.c)

    def solve(self, b: np.ndarray, x0: np.ndarray | None = None) -> tuple[np.ndarray, int]:
        x, rep = cg_solve(self.apply, b, x0, self.cfg, inner=self.grid.inner,
                          precond=self.precond)
        self.last_report = rep
        if not rep.converged:
            raise CgNotConverged(
                f"CG did not reach tol {self.cfg.tol_rel:.1e} in {rep.iterations} "
                f"iterations (residual {rep.final_rel_residual:.3e})"
            )
        return x, rep.iterations


def dense_solve(grid: Grid, plan: ConvolutionPlan, c: float, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination on the assembled ``I + c L_h^2``."""
    if plan.grid != grid:
        raise ValueError("plan was built for a different grid")
    b = grid.check(b)
    if c == 0:
        return b.copy()
    return DirectSolver(plan, c).solve(b)[0]


def make_solver(kind: str, plan: ConvolutionPlan, c: float, cfg: CgConfig = CgConfig()):
    if kind in ("fast", "fast_cg", "cg"):
        return FastSolver(plan, c, cfg)
    if kind == "direct":
        return DirectSolver(plan, c)
    raise ValueError(f"unknown solver {kind!r}; expected 'fast_cg' or 'direct'")
