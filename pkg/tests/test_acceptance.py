"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section of the terminal summary.  Criterion 12 is report-only.  Set
``NLCH_FULL_ACCEPTANCE=1`` to run it at the full reduced-scale grid (h = 1/64,
about half an hour) instead of the quick h = 1/32 variant.
"""

import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from nlch import experiments as ex
from nlch.grid import make_grid
from nlch.kernel import Gaussian, apply_Lh, build_plan, conv_apply, dense_conv, plan_for, sample_kernel
from nlch.krylov import DENSE_SIZE_GUARD, DenseTooLarge, dense_solve
from nlch.sav import (
    SolverSet,
    _predict,
    bootstrap,
    init_state,
    sav1_step,
    sav2_step,
    scheme_residuals,
)

# tolerances, fixed by the acceptance criteria
ORACLE_TOL = 1e-12
NULLSPACE_TOL = 1e-13
ADJOINT_TOL = 1e-12
THETA_FLOOR = -1e-10
SAV1_RATE = (0.8, 1.2)
SAV2_RATE = (1.7, 2.2)
SPACE_RATE = (1.7, 2.4)
AGREE_TOL = 1e-8
ENERGY_SLACK = 1e-9
MASS_TOL = 1e-9
RESIDUAL_FACTOR = 10.0
MATVEC_RATIO = 5.0
DIRECT_SLOWDOWN = 10.0
MERGE_BEFORE = 15.0
SLOPE_RANGE = (-0.55, -0.15)


def test_c01_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    t0 = time.perf_counter()
    for M in (4, 8, 16, 33):
        g = make_grid(1.0, M)
        for delta in (0.3, 0.5):
            table = sample_kernel(g, Gaussian(delta))
            plan = build_plan(g, table)
            for _ in range(20):
                v = rng.uniform(-1, 1, g.shape)
                err = np.max(np.abs(conv_apply(plan, v) - dense_conv(g, table, v)))
                scale = np.max(np.abs(v)) * np.max(table) * 4 * g.L**2
                worst = max(worst, err / scale)
    seconds = time.perf_counter() - t0
    report(1, "fast convolution equals dense trapezoid sum", worst <= ORACLE_TOL and seconds < 5,
           f"max scaled error {worst:.2e} (tol {ORACLE_TOL:g}), {seconds:.2f}s (limit 5s)")


def test_c02_operator_identities(report):
    rng = np.random.default_rng(7)
    null_err = adj_err = 0.0
    psd_min = math.inf
    for M in (4, 8, 12, 16):
        g = make_grid(1.0, M)
        plan = plan_for(g, Gaussian(math.sqrt(0.1)))
        null_err = max(null_err, np.max(np.abs(apply_Lh(plan, 2.5 * g.ones())))
                       / max(1.0, np.max(plan.jstar1)))
        for _ in range(10):
            u, v = rng.normal(size=(2, *g.shape))
            a = g.inner(apply_Lh(plan, u), v)
            b = g.inner(u, apply_Lh(plan, v))
            adj_err = max(adj_err, abs(a - b) / (g.norm(u) * g.norm(v)))
            psd_min = min(psd_min, g.inner(apply_Lh(plan, v), v) / g.norm(v) ** 2)

    spec = ex.preset("example1", M=32)
    spec = replace(spec, T=200 * spec.dt)
    thetas = [s.theta for s in ex.run_simulation(spec).samples[1:]]
    ok = (null_err <= NULLSPACE_TOL and adj_err <= ADJOINT_TOL and psd_min >= -ADJOINT_TOL
          and len(thetas) == 200 and min(thetas) >= THETA_FLOOR)
    report(2, "L_h null space, self-adjointness, PSD and theta >= 0", ok,
           f"|L_h c| {null_err:.1e}, adjoint gap {adj_err:.1e}, min Rayleigh {psd_min:.2e}, "
           f"min theta over {len(thetas)} steps {min(thetas):.3e}")


def _temporal(scheme):
    spec = replace(ex.preset("example1", study="temporal"), scheme=scheme)
    t0 = time.perf_counter()
    table = ex.temporal_study(spec)
    return table, time.perf_counter() - t0


def test_c03_temporal_order_sav1(report):
    table, seconds = _temporal("sav1")
    rate = table.mean_rate(last=3)
    ok = SAV1_RATE[0] <= rate <= SAV1_RATE[1] and seconds < 180
    rates = ", ".join(f"{r:.3f}" for r in table.rates)
    report(3, "SAV1 temporal order", ok,
           f"rates [{rates}], mean of last 3 = {rate:.4f} in {SAV1_RATE}, {seconds:.0f}s")


def test_c04_temporal_order_sav2(report):
    table, seconds = _temporal("sav2")
    rate = table.mean_rate(last=3)
    ok = SAV2_RATE[0] <= rate <= SAV2_RATE[1] and seconds < 180
    rates = ", ".join(f"{r:.3f}" for r in table.rates)
    report(4, "SAV2 temporal order", ok,
           f"rates [{rates}], mean of last 3 = {rate:.4f} in {SAV2_RATE}, {seconds:.0f}s")


def test_c05_spatial_order(report):
    spec = ex.preset("example1", study="spatial")
    t0 = time.perf_counter()
    table = ex.spatial_study(spec)
    seconds = time.perf_counter() - t0
    rates = table.rates
    ok = (len(rates) == 2 and all(SPACE_RATE[0] <= r <= SPACE_RATE[1] for r in rates)
          and seconds < 300)
    errs = ", ".join(f"{r.error:.3e}" for r in table.rows)
    report(5, "spatial order", ok,
           f"errors [{errs}], rates [{', '.join(f'{r:.3f}' for r in rates)}] in {SPACE_RATE}, "
           f"{seconds:.0f}s")


def test_c06_fast_direct_agreement(report):
    worst = 0.0
    compared = 0
    temporal = ex.preset("example1", study="temporal")
    grid = temporal.grid()
    for dt in temporal.ladder:
        spec = replace(temporal, dt=dt)
        fast = ex.run_simulation(spec).state.phi
        direct = ex.run_simulation(replace(spec, solver="direct")).state.phi
        worst = max(worst, grid.norm(fast - direct) / grid.norm(direct))
        compared += 1
    spatial = ex.preset("example1", study="spatial")
    for h in spatial.ladder:
        spec = replace(spatial, M=ex._m_for(h))
        if not ex.direct_fits(spec.grid().size):
            continue
        g = spec.grid()
        fast = ex.run_simulation(spec).state.phi
        direct = ex.run_simulation(replace(spec, solver="direct")).state.phi
        worst = max(worst, g.norm(fast - direct) / g.norm(direct))
        compared += 1
    report(6, "fast CG and dense LU agree", worst <= AGREE_TOL and compared == 8,
           f"max relative difference {worst:.2e} (tol {AGREE_TOL:g}) over {compared} ladder entries")


def test_c07_energy_stability(report):
    t0 = time.perf_counter()
    worst = -math.inf
    runs = 0
    for scheme in ("sav1", "sav2"):
        for dt in (1e-3, 1e-2, 1e-1, 1.0):
            spec = ex.preset("example3", M=64, dt=dt, T=200 * dt, scheme=scheme, seed=11,
                            cg_precond="cosine")
            res = ex.run_simulation(spec)  # the stepper itself raises on any increase
            E = np.array([s.modified_energy for s in res.samples[1:]])
            rel = np.max((E[1:] - E[:-1]) / np.abs(E[:-1]))
            worst = max(worst, rel)
            runs += 1
    seconds = time.perf_counter() - t0
    ok = worst <= ENERGY_SLACK and runs == 8 and seconds < 120
    report(7, "modified energy non-increasing", ok,
           f"largest relative step increase {worst:.2e} (slack {ENERGY_SLACK:g}), "
           f"8 runs x 200 steps in {seconds:.0f}s")


def test_c08_mass_conservation(report):
    spec = ex.preset("example3", M=64, dt=1e-3, T=1.0, seed=3)
    res = ex.run_simulation(spec)
    m0 = res.samples[0].mass
    drift = max(abs(s.mass - m0) for s in res.samples)
    # max|phi| over the run is not stored per step; the final field bounds it in practice
    bound = MASS_TOL * 4 * max(np.max(np.abs(res.state.phi)), np.max(np.abs(spec.initial(res.grid))))
    report(8, "mass conservation", drift <= bound and len(res.samples) == 1001,
           f"max drift {drift:.2e} over 1000 steps (bound {bound:.2e})")


def test_c09_residual_closure(report):
    spec = ex.preset("example1", M=32)
    params = spec.params()
    grid = spec.grid()
    plan = plan_for(grid, Gaussian(spec.delta))
    solvers = SolverSet(plan, params)
    n_steps = 120
    picks = set(np.random.default_rng(99).choice(np.arange(1, n_steps), size=20, replace=False))
    worst = 0.0
    state = init_state(grid, spec.initial(grid), params)
    state, _ = bootstrap(state, params, plan, solvers)
    for n in range(1, n_steps):
        phi_t, _ = _predict(state, params, plan, solvers, None)
        new, _ = sav2_step(state, params, plan, solvers)
        if n in picks:
            worst = max(worst, *scheme_residuals(state, new, phi_t, params, plan, "sav2"))
        state = new
    # the first-order scheme through the same oracle
    s1 = init_state(grid, spec.initial(grid), params)
    for n in range(20):
        phi_t, _ = _predict(s1, params, plan, solvers, None)
        new, _ = sav1_step(s1, params, plan, solvers)
        worst = max(worst, *scheme_residuals(s1, new, phi_t, params, plan, "sav1"))
        s1 = new
    tol = RESIDUAL_FACTOR * params.cg.tol_rel
    report(9, "scheme residual closure", worst <= tol,
           f"max relative residual {worst:.2e} at 20 random BDF2 steps + 20 SAV1 steps "
           f"(limit {tol:.0e})")


def test_c10_performance_scaling(report):
    ex.tune_allocator()  # as the bench command does
    plans = {M: plan_for(make_grid(1.0, M), Gaussian(0.1)) for M in (128, 256)}
    times = {M: math.inf for M in plans}
    for _ in range(5):  # interleaved so drift in machine load hits both sizes
        for M, plan in plans.items():
            times[M] = min(times[M], ex.time_matvec(plan, repeats=10))
    ratio = times[256] / times[128]

    M_big = math.isqrt(DENSE_SIZE_GUARD) + 1
    g_big = make_grid(1.0, M_big)
    try:
        dense_solve(g_big, plan_for(g_big, Gaussian(0.1)), 0.1, g_big.ones())
        refused = False
    except DenseTooLarge:
        refused = True

    row = ex.benchmark(ex.preset("example1"), Ms=(64,))[0]
    slowdown = row.direct_seconds / row.fast_seconds
    ok = ratio <= MATVEC_RATIO and refused and slowdown >= DIRECT_SLOWDOWN
    report(10, "performance scaling", ok,
           f"matvec M=256/M=128 = {ratio:.2f} (<= {MATVEC_RATIO}), dense refused at "
           f"N={g_big.size}: {refused}, direct/fast at M=64 = {slowdown:.0f}x (>= {DIRECT_SLOWDOWN:g}x)")


def test_c11_coarsening_merge(report):
    spec = ex.preset("example2", M=128, dt=1e-3, T=MERGE_BEFORE)
    grid = spec.grid()
    first = ex.count_components(spec.initial(grid))
    merged = {}

    def stop(state, sample):
        if state.step % 5 == 0 and ex.count_components(state.phi) == 1:
            merged["t"] = state.t
            merged["r"] = sample.r
            merged["sqrt"] = sample.sqrtE1C0
            return True
        return False

    res = ex.run_simulation(spec, stop=stop)
    ok = first == 2 and "t" in merged and merged["t"] < MERGE_BEFORE
    detail = f"components {first} -> 1 at t = {merged.get('t', float('nan')):.3f} (< {MERGE_BEFORE:g})"
    if "t" in merged:
        detail += (f"; r / sqrt(E1 + C0) at merge = {merged['r'] / merged['sqrt']:.3f} "
                   f"after {res.state.step} steps")
    report(11, "Example 2 bubbles coalesce", ok, detail)


def test_c12_power_law(report):
    full = os.environ.get("NLCH_FULL_ACCEPTANCE") == "1"
    spec = ex.preset("example3", dt=1e-3) if full else ex.preset("example3", M=64, dt=1e-3)
    t0 = time.perf_counter()
    res = ex.energy_decay_study(spec, t1=0.5, t2=10.0, every=10)
    seconds = time.perf_counter() - t0
    ok = SLOPE_RANGE[0] <= res.slope <= SLOPE_RANGE[1]
    report(12, "coarsening power law (report only)", ok,
           f"log-log slope {res.slope:.3f} on t in [0.5, 10], target {SLOPE_RANGE}, "
           f"h = {spec.h:g}, {seconds:.0f}s", soft=True)
    if not ok:
        import warnings
        warnings.warn(f"energy decay slope {res.slope:.3f} outside {SLOPE_RANGE}")


# reference first-row errors of the full-size temporal study (h = 0.01, dt = T/16)
REFERENCE_FIRST_ROW = {"sav1": 2.5139e-3, "sav2": 9.2979e-4}


@pytest.mark.skipif(os.environ.get("NLCH_PAPER_SCALE") != "1",
                    reason="paper-scale temporal study; set NLCH_PAPER_SCALE=1")
@pytest.mark.parametrize("scheme", ["sav1", "sav2"])
def test_c05b_paper_scale_first_row(report, scheme):
    spec = replace(ex.preset("example1", paper_scale=True, study="temporal"), scheme=scheme)
    table = ex.temporal_study(spec)
    got = table.rows[0].error
    want = REFERENCE_FIRST_ROW[scheme]
    report(5, f"paper-scale first row, {scheme} (report only)", abs(got / want - 1) <= 0.3,
           f"error {got:.4e} vs reference {want:.4e} ({got / want - 1:+.0%}, band +-30%)",
           soft=True)
