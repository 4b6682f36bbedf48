"""Presets, simulation driver and convergence / timing studies."""

from __future__ import annotations

import csv
import ctypes
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import grid as gridmod
from .grid import Grid, make_grid
from .kernel import Gaussian, apply_A, apply_Lh, plan_for
from .krylov import (
    DENSE_SIZE_GUARD,
    CgConfig,
    DirectSolver,
    FastSolver,
)
from .sav import (
    SavParams,
    SolverSet,
    bootstrap,
    compute_energies,
    init_state,
    sav1_step,
    sav2_step,
)

log = logging.getLogger(__name__)

PRESETS = ("example1", "example2", "example3")
EXAMPLE2_SNAPSHOTS = (0.0, 0.05, 0.1, 1.0, 5.0, 10.0)
EXAMPLE3_SNAPSHOTS = (0.0, 0.1, 0.5, 1.0, 2.0, 10.0)


@dataclass(frozen=True)
class StudySpec:
    preset: str = "example1"
    epsilon: float = math.sqrt(0.1)
    mobility: float = 1.0
    delta: float = math.sqrt(0.1)
    C0: float = 1.0
    T: float = 0.05
    dt: float = 0.05 / 16
    M: int = 32
    L: float = 1.0
    scheme: str = "sav2"
    solver: str = "fast_cg"
    predictor: str = "extrapolate"
    ladder: tuple = ()
    reference: float | None = None
    seed: int = 0
    amplitude: float = 0.1
    cg_tol: float = 1e-10
    cg_max_iter: int = 5000
    cg_precond: str = "none"
    snapshot_times: tuple = ()
    check_energy: bool = True

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.scheme not in ("sav1", "sav2"):
            raise ValueError(f"scheme must be 'sav1' or 'sav2', got {self.scheme!r}")
        ladder = tuple(float(x) for x in self.ladder)
        if any(a <= b for a, b in zip(ladder, ladder[1:])):
            raise ValueError(f"ladder must be strictly descending, got {ladder}")
        if self.reference is not None and ladder and not self.reference <= min(ladder):
            raise ValueError("reference must be at least as fine as every ladder entry")
        object.__setattr__(self, "ladder", ladder)

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.M

    def grid(self) -> Grid:
        return make_grid(self.L, self.M)

    def params(self) -> SavParams:
        return SavParams(
            epsilon=self.epsilon,
            dt=self.dt,
            T=self.T,
            mobility=self.mobility,
            C0=self.C0,
            predictor=self.predictor,
            cg=CgConfig(tol_rel=self.cg_tol, max_iter=self.cg_max_iter,
                        preconditioner=self.cg_precond),
            solver=self.solver,
            check_energy=self.check_energy,
        )

    def initial(self, grid: Grid) -> np.ndarray:
        if self.preset == "example1":
            return gridmod.init_example1(grid)
        if self.preset == "example2":
            return gridmod.init_example2(grid, epsilon=self.epsilon)
        return gridmod.init_example3(grid, amplitude=self.amplitude, seed=self.seed)


def _m_for(h: float, L: float = 1.0) -> int:
    M = 2.0 * L / h
    if abs(M - round(M)) > 1e-9 * M:
        raise ValueError(f"mesh size h={h} does not divide the domain width {2 * L}")
    return int(round(M))


def preset(name: str, paper_scale: bool = False, study: str = "run", **overrides) -> StudySpec:
    """Build a :class:`StudySpec` for one of the three examples.

    ``study`` selects the ladder for ``"temporal"`` and ``"spatial"``
    studies; the default scale is reduced so the suite runs in minutes.
    """
    if name == "example1":
        eps = math.sqrt(0.1)
        T = 0.05
        base = dict(preset=name, epsilon=eps, delta=eps, mobility=1.0, T=T)
        if study == "spatial":
            dt = 5e-5
            if paper_scale:
                hs, href, T = [2.0**-k for k in range(3, 9)], 2.0**-10, 0.05
            else:
                hs, href, T = [2.0**-3, 2.0**-4, 2.0**-5], 2.0**-7, 20 * dt
            base.update(T=T, dt=dt, M=_m_for(href), ladder=tuple(hs), reference=href,
                        cg_tol=1e-12)
        else:
            h = 0.01 if paper_scale else 1.0 / 16
            kmax, kref = (9, 14) if paper_scale else (8, 12)
            base.update(M=_m_for(h), dt=T * 2.0**-4)
            if study == "temporal":
                base.update(ladder=tuple(T * 2.0**-k for k in range(4, kmax + 1)),
                            reference=T * 2.0**-kref, cg_tol=1e-12)
    elif name == "example2":
        base = dict(preset=name, epsilon=0.02, delta=0.02, mobility=1.0, T=10.0, dt=1e-3,
                    M=_m_for(0.01 if paper_scale else 1.0 / 64))
        if paper_scale:
            base["snapshot_times"] = EXAMPLE2_SNAPSHOTS
    elif name == "example3":
        base = dict(preset=name, epsilon=0.02, delta=0.05, mobility=1.0, T=10.0, dt=1e-3,
                    M=_m_for(0.01 if paper_scale else 1.0 / 64))
        if paper_scale:
            base["snapshot_times"] = EXAMPLE3_SNAPSHOTS
    else:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")
    base.update(overrides)
    return StudySpec(**base)


# --- driver -------------------------------------------------------------------

@dataclass
class SimulationResult:
    grid: Grid
    state: object
    samples: list
    seconds: float
    stopped_early: bool = False


def snapshot_steps(times: Sequence[float], dt: float) -> dict[int, float]:
    return {int(round(t / dt)): t for t in times}


def check_runnable(spec: StudySpec) -> SavParams:
    """Validate the time schedule of ``spec``; returns its :class:`SavParams`."""
    params = spec.params()
    if abs(params.n_steps * spec.dt - spec.T) > 1e-9 * spec.T:
        raise ValueError(f"T={spec.T} is not a whole number of steps dt={spec.dt}")
    if spec.scheme == "sav2" and params.n_steps < 2:
        raise ValueError("the BDF2 scheme needs T >= 2 dt (one bootstrap step plus one BDF2 step)")
    return params


def run_simulation(
    spec: StudySpec,
    on_sample: Callable | None = None,
    on_snapshot: Callable | None = None,
    snapshot_every: int = 0,
    stop: Callable | None = None,
    phi0: np.ndarray | None = None,
) -> SimulationResult:
    """Integrate from ``t = 0`` to ``T``.

    ``on_snapshot(step, t, phi)`` fires at ``spec.snapshot_times`` when given,
    otherwise every ``snapshot_every`` steps (and at both ends).
    ``on_sample(sample)`` receives every :class:`EnergySample`.  ``stop(state,
    sample)`` returning true ends the run early.
    """
    grid = spec.grid()
    params = check_runnable(spec)
    n_steps = params.n_steps

    t_start = time.perf_counter()
    plan = plan_for(grid, Gaussian(spec.delta))
    solvers = SolverSet(plan, params)
    state = init_state(grid, spec.initial(grid) if phi0 is None else phi0, params)
    sample = compute_energies(state, params, plan, spec.scheme)
    samples = [sample]

    if spec.snapshot_times:
        schedule = snapshot_steps(spec.snapshot_times, spec.dt)
    else:
        schedule = {0: 0.0, n_steps: spec.T}
        if snapshot_every > 0:
            schedule.update({n: n * spec.dt for n in range(0, n_steps + 1, snapshot_every)})

    def emit(st, smp):
        if on_sample is not None:
            on_sample(smp)
        if on_snapshot is not None and st.step in schedule:
            on_snapshot(st.step, st.t, st.phi)

    emit(state, sample)
    stopped = False
    step = sav1_step if spec.scheme == "sav1" else sav2_step
    for n in range(n_steps):
        try:
            if spec.scheme == "sav2" and n == 0:
                state, sample = bootstrap(state, params, plan, solvers)
            else:
                state, sample = step(state, params, plan, solvers)
        except Exception as exc:
            raise _at_step(exc, n + 1) from exc
        samples.append(sample)
        emit(state, sample)
        if stop is not None and stop(state, sample):
            stopped = True
            break
    return SimulationResult(grid, state, samples, time.perf_counter() - t_start, stopped)


def _at_step(exc: Exception, step: int) -> Exception:
    try:
        return type(exc)(f"step {step}: {exc}")
    except Exception:
        return exc


def count_components(phi: np.ndarray, level: float = 0.0) -> int:
    """Number of 4-connected components of ``{phi > level}``."""
    return int(ndimage.label(phi > level)[1])


# --- rate tables --------------------------------------------------------------

@dataclass
class RateRow:
    size: float
    error: float
    rate: float | None
    seconds: float


@dataclass
class RateTable:
    kind: str
    rows: list[RateRow] = field(default_factory=list)
    degenerate: bool = False

    @property
    def rates(self) -> list[float]:
        return [r.rate for r in self.rows if r.rate is not None]

    def mean_rate(self, last: int | None = None) -> float:
        rates = self.rates
        if last is not None:
            rates = rates[-last:]
        return float(np.mean(rates)) if rates else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["size", "error", "rate", "seconds"])
            for r in self.rows:
                w.writerow([repr(r.size), repr(r.error),
                            "" if r.rate is None else repr(r.rate), f"{r.seconds:.6f}"])

    def format(self) -> str:
        head = f"{'size':>14} {'L2 error':>14} {'rate':>8} {'seconds':>10}"
        lines = [f"# {self.kind} convergence", head]
        for r in self.rows:
            rate = "-" if r.rate is None else f"{r.rate:.4f}"
            lines.append(f"{r.size:>14.6e} {r.error:>14.6e} {rate:>8} {r.seconds:>10.3f}")
        if self.degenerate:
            lines.append("# errors at roundoff level: rates undefined")
        return "\n".join(lines)


def _rates(sizes, errors, floor):
    rates = [None]
    for k in range(1, len(sizes)):
        halved = math.isclose(sizes[k - 1] / sizes[k], 2.0, rel_tol=1e-9)
        if halved and errors[k - 1] > floor and errors[k] > floor:
            rates.append(math.log2(errors[k - 1] / errors[k]))
        else:
            rates.append(None)
    return rates


def _table(kind, sizes, errors, seconds, scale):
    floor = 1e-13 * max(scale, 1e-300)
    table = RateTable(kind)
    for s, e, r, t in zip(sizes, errors, _rates(sizes, errors, floor), seconds):
        table.rows.append(RateRow(s, e, r, t))
    table.degenerate = all(e <= floor for e in errors)
    return table


def temporal_study(spec: StudySpec, keep_solutions: bool = False,
                   phi0: np.ndarray | None = None):
    """Self-convergence in time against a same-grid run with ``spec.reference``.

    Returns the :class:`RateTable`; with ``keep_solutions`` also the list of
    final fields, one per ladder entry.  ``phi0`` replaces the preset's
    initial field.
    """
    if not spec.ladder or spec.reference is None:
        raise ValueError("temporal study needs a dt ladder and a reference dt")
    ref = run_simulation(replace(spec, dt=spec.reference), phi0=phi0)
    grid = ref.grid
    errors, seconds, finals = [], [], []
    for dt in spec.ladder:
        res = run_simulation(replace(spec, dt=dt), phi0=phi0)
        errors.append(gridmod.l2_distance(grid, res.state.phi, ref.state.phi))
        seconds.append(res.seconds)
        finals.append(res.state.phi)
    table = _table("temporal", list(spec.ladder), errors, seconds, grid.norm(ref.state.phi))
    return (table, finals) if keep_solutions else table


def restrict(fine: np.ndarray, M_fine: int, M_coarse: int) -> np.ndarray:
    """Sample a fine field at the nodes of a nested coarse grid."""
    ratio = M_fine // M_coarse
    if ratio * M_coarse != M_fine or ratio & (ratio - 1):
        raise ValueError(f"grids M={M_coarse} and M={M_fine} are not power-of-two nested")
    return fine[::ratio, ::ratio]


def spatial_study(spec: StudySpec, keep_solutions: bool = False):
    """Self-convergence in space against a nested fine-grid reference."""
    if not spec.ladder or spec.reference is None:
        raise ValueError("spatial study needs an h ladder and a reference h")
    M_ref = _m_for(spec.reference, spec.L)
    Ms = [_m_for(h, spec.L) for h in spec.ladder]
    for M in Ms:
        restrict(np.zeros((M_ref + 1, M_ref + 1)), M_ref, M)
    ref = run_simulation(replace(spec, M=M_ref))
    errors, seconds, finals = [], [], []
    for M in Ms:
        res = run_simulation(replace(spec, M=M))
        coarse = res.grid
        errors.append(gridmod.l2_distance(coarse, res.state.phi,
                                          restrict(ref.state.phi, M_ref, M)))
        seconds.append(res.seconds)
        finals.append(res.state.phi)
    table = _table("spatial", list(spec.ladder), errors, seconds, ref.grid.norm(ref.state.phi))
    return (table, finals) if keep_solutions else table


# --- timing -------------------------------------------------------------------

def _available_memory() -> int:
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_AVPHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        return 1 << 62


def direct_fits(N: int) -> bool:
    """Dense path limit: the size guard, and two N x N matrices in free memory."""
    return N <= DENSE_SIZE_GUARD and 2 * 8 * N * N < 0.7 * _available_memory()


@dataclass
class BenchRow:
    M: int
    N: int
    P: int
    plan_bytes: int
    matvec_seconds: float
    fast_seconds: float
    cg_iterations: int
    direct_seconds: float | None


def tune_allocator() -> bool:
    """Stop glibc from handing FFT work arrays back to the OS after every call.

    Each convolution allocates a few arrays of several megabytes.  With the
    default thresholds glibc maps and unmaps them on every call, and the page
    faults cost more than the transforms from M = 256 on.  Raising the mmap
    and trim thresholds keeps them in the heap.  Process-wide, so it is left
    to entry points (the CLI, :func:`benchmark`).  Returns False where there
    is no glibc ``mallopt``.
    """
    try:
        libc = ctypes.CDLL(None)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
    ok = mallopt(M_MMAP_THRESHOLD, 32 << 20) == 1
    return ok and mallopt(M_TRIM_THRESHOLD, 256 << 20) == 1


def time_matvec(plan, repeats: int = 20) -> float:
    v = np.random.default_rng(0).standard_normal(plan.grid.shape)
    apply_Lh(plan, v)
    best = math.inf
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeats):
            apply_Lh(plan, v)
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best


def benchmark(spec: StudySpec, Ms: Sequence[int] = (16, 32, 64, 128, 256),
              direct: bool = True) -> list[BenchRow]:
    """Wall times of one matvec and one stiffness solve per grid.

    The dense LU path is skipped (``direct_seconds`` is ``None``) when the
    matrix would not fit, mirroring out-of-memory rows.
    """
    tune_allocator()
    rows = []
    params = spec.params()
    coef = 2.0 / 3.0 * spec.mobility * spec.dt * spec.epsilon**2
    for M in Ms:
        grid = make_grid(spec.L, M)
        plan = plan_for(grid, Gaussian(spec.delta))
        b = spec.initial(grid)
        t_mv = time_matvec(plan, repeats=min(200, max(3, int(2e6 // grid.size))))
        fast = FastSolver(plan, coef, params.cg)
        t0 = time.perf_counter()
        _, iters = fast.solve(b)
        t_fast = time.perf_counter() - t0
        t_direct = None
        if direct and direct_fits(grid.size):
            t0 = time.perf_counter()
            DirectSolver(plan, coef).solve(b)
            t_direct = time.perf_counter() - t0
        plan_bytes = plan.symbol.nbytes + plan.half_symbol.nbytes + plan.jstar1.nbytes
        rows.append(BenchRow(M, grid.size, plan.P, plan_bytes, t_mv, t_fast, iters, t_direct))
        log.info("bench M=%d: matvec %.3e s, cg %.3e s (%d it), direct %s",
                 M, t_mv, t_fast, iters, t_direct)
    return rows


def write_bench_csv(path, rows: Sequence[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "N", "P", "plan_bytes", "matvec_seconds", "fast_seconds",
                    "cg_iterations", "direct_seconds"])
        for r in rows:
            w.writerow([r.M, r.N, r.P, r.plan_bytes, f"{r.matvec_seconds:.6e}",
                        f"{r.fast_seconds:.6e}", r.cg_iterations,
                        "skipped" if r.direct_seconds is None else f"{r.direct_seconds:.6e}"])


# --- coarsening ---------------------------------------------------------------

@dataclass
class EnergyDecay:
    t: np.ndarray
    original: np.ndarray
    modified: np.ndarray
    slope: float
    window: tuple[float, float]


def fit_power_law(t, energy, t1: float, t2: float) -> float:
    t = np.asarray(t)
    energy = np.asarray(energy)
    sel = (t >= t1) & (t <= t2) & (energy > 0)
    if sel.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(t[sel]), np.log(energy[sel]), 1)[0])


def energy_decay_study(spec: StudySpec, t1: float = 0.5, t2: float = 10.0,
                       every: int = 10) -> EnergyDecay:
    """Log-log slope of the original energy over the coarsening window."""
    ts, orig, mod = [], [], []

    def record(sample):
        if sample.step % every == 0:
            ts.append(sample.t)
            orig.append(sample.original_energy)
            mod.append(sample.modified_energy)

    run_simulation(spec, on_sample=record)
    t = np.array(ts)
    E = np.array(orig)
    return EnergyDecay(t, E, np.array(mod), fit_power_law(t, E, t1, t2), (t1, t2))


def stiffness_residual(plan, x, b, coef) -> float:
    """Relative trapezoid-norm residual of ``(I + coef L_h^2) x = b``."""
    grid = plan.grid
    return grid.norm(apply_A(plan, x, coef) - b) / grid.norm(b)
