"""First-order and BDF2 scalar auxiliary variable steppers.

Both schemes treat the nonlocal term implicitly and the bulk force through

    eta = F'(phi_tilde) / sqrt(E1(phi_tilde) + C0)

so each step reduces to two solves with ``A = I + a L_h^2`` and one scalar
equation for ``<eta, phi^{n+1}>``.  All inner products are trapezoid-weighted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import DOUBLE_WELL, Grid, Potential
from .kernel import ConvolutionPlan, apply_Lh
from .krylov import CgConfig, make_solver

SCHEMES = ("sav1", "sav2")
PREDICTORS = ("extrapolate", "solve")


class InvariantViolation(RuntimeError):
    """A discrete identity that must hold for every time step failed."""


class EnergyIncrease(InvariantViolation):
    pass


@dataclass(frozen=True)
class SavParams:
    epsilon: float
    dt: float
    T: float
    mobility: float = 1.0
    C0: float = 1.0
    potential: Potential = DOUBLE_WELL
    predictor: str = "extrapolate"
    cg: CgConfig = CgConfig()
    solver: str = "fast_cg"
    energy_slack: float = 1e-9   # relative; covers the CG tolerance
    check_energy: bool = True
    reproject: bool = False      # reset r to sqrt(E1 + C0) after each step

    def __post_init__(self):
        for name in ("epsilon", "dt", "mobility", "C0"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a positive number, got {value!r}")
        if not self.T >= self.dt:
            raise ValueError(f"final time T={self.T} is shorter than one step dt={self.dt}")
        if self.predictor not in PREDICTORS:
            raise ValueError(f"predictor must be one of {PREDICTORS}, got {self.predictor!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class SavState:
    phi: np.ndarray
    phi_prev: np.ndarray
    r: float
    r_prev: float
    step: int = 0
    t: float = 0.0
    # warm start for the A^{-1} L_h eta solve; not part of the scheme
    q_guess: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class EnergySample:
    step: int
    t: float
    mass: float
    r: float
    sqrtE1C0: float
    modified_energy: float
    original_energy: float
    cg_iterations: int = 0
    theta: float = float("nan")


class SolverSet:
    """Linear solvers for ``I + a L_h^2`` cached by coefficient ``a``."""

    def __init__(self, plan: ConvolutionPlan, params: SavParams):
        self.plan = plan
        self.params = params
        self._cache = {}

    def get(self, coef: float):
        solver = self._cache.get(coef)
        if solver is None:
            solver = make_solver(self.params.solver, self.plan, coef, self.params.cg)
            self._cache[coef] = solver
        return solver


def _solvers(plan, params, solvers):
    if solvers is None:
        return SolverSet(plan, params)
    return solvers


def init_state(grid: Grid, phi0: np.ndarray, params: SavParams) -> SavState:
    phi0 = grid.check(phi0, "phi0").copy()
    radicand = grid.integrate(params.potential.F(phi0)) + params.C0
    if not radicand > 0:
        raise InvariantViolation(f"E1 + C0 = {radicand:.6g} must be positive")
    r0 = math.sqrt(radicand)
    return SavState(phi=phi0, phi_prev=phi0.copy(), r=r0, r_prev=r0, step=0, t=0.0)


def compute_eta(grid: Grid, phi_tilde: np.ndarray, params: SavParams):
    """Return ``(eta, denom)`` with ``denom = sqrt(E1(phi_tilde) + C0)``."""
    radicand = grid.integrate(params.potential.F(phi_tilde)) + params.C0
    if not radicand > 0:
        raise InvariantViolation(f"E1 + C0 = {radicand:.6g} must be positive")
    denom = math.sqrt(radicand)
    return params.potential.dF(phi_tilde) / denom, denom


def predictor_extrapolate(state: SavState) -> np.ndarray:
    if state.step < 1:
        raise ValueError("extrapolation needs two time levels (step >= 1)")
    return 2.0 * state.phi - state.phi_prev


def predictor_solve(state, params: SavParams, plan: ConvolutionPlan, solvers=None):
    """Semi-implicit first-order guess: ``(I + M dt eps^2 L_h^2) x = phi - M dt L_h F'(phi)``.

    Returns ``(phi_tilde, iterations)``.
    """
    solvers = _solvers(plan, params, solvers)
    k = params.mobility * params.dt
    rhs = state.phi - k * apply_Lh(plan, params.potential.dF(state.phi))
    return solvers.get(k * params.epsilon**2).solve(rhs, x0=state.phi)


def _predict(state, params, plan, solvers, predictor):
    predictor = predictor or params.predictor
    if predictor == "solve" or state.step == 0:
        return predictor_solve(state, params, plan, solvers)
    return predictor_extrapolate(state), 0


def _finish(grid, plan, params, state, phi_new, r_new, iters, theta, scheme):
    if not np.all(np.isfinite(phi_new)) or not math.isfinite(r_new):
        raise InvariantViolation(f"non-finite solution at step {state.step + 1}")
    if params.reproject:
        r_new = math.sqrt(grid.integrate(params.potential.F(phi_new)) + params.C0)
    new = SavState(
        phi=phi_new,
        phi_prev=state.phi,
        r=r_new,
        r_prev=state.r,
        step=state.step + 1,
        t=(state.step + 1) * params.dt,
    )
    sample = compute_energies(new, params, plan, scheme)
    sample = replace(sample, cg_iterations=iters, theta=theta)
    if params.check_energy and not (scheme == "sav2" and state.step == 0):
        before = compute_energies(state, params, plan, scheme).modified_energy
        after = sample.modified_energy
        if after > before + params.energy_slack * max(abs(before), 1e-300):
            raise EnergyIncrease(
                f"{scheme} modified energy increased at step {new.step}: "
                f"{before:.17g} -> {after:.17g}"
            )
    return new, sample


def sav1_step(state: SavState, params: SavParams, plan: ConvolutionPlan,
              solvers=None, predictor=None):
    """Advance one first-order SAV step; returns ``(new_state, sample)``."""
    grid = plan.grid
    solvers = _solvers(plan, params, solvers)
    phi_t, iters = _predict(state, params, plan, solvers, predictor)
    eta, _ = compute_eta(grid, phi_t, params)
    Leta = apply_Lh(plan, eta)
    k = params.mobility * params.dt
    solver = solvers.get(k * params.epsilon**2)

    rhs = state.phi - k * (state.r - 0.5 * grid.inner(eta, state.phi)) * Leta
    p, it_p = solver.solve(rhs, x0=phi_t)
    q, it_q = solver.solve(Leta, x0=state.q_guess)
    theta = grid.inner(eta, q)
    denom = 1.0 + 0.5 * k * theta
    if not denom > 0:
        raise InvariantViolation(f"scalar reduction denominator {denom:.3e} <= 0")
    c = grid.inner(eta, p) / denom
    phi_new = p - 0.5 * k * c * q
    r_new = state.r + 0.5 * grid.inner(eta, phi_new - state.phi)

    new, sample = _finish(grid, plan, params, state, phi_new, r_new,
                          iters + it_p + it_q, theta, "sav1")
    new.q_guess = q
    return new, sample


def sav2_step(state: SavState, params: SavParams, plan: ConvolutionPlan,
              solvers=None, predictor=None):
    """Advance one BDF2 SAV step; needs ``state.step >= 1``."""
    if state.step < 1:
        raise ValueError("BDF2 step needs two time levels; call bootstrap first")
    grid = plan.grid
    solvers = _solvers(plan, params, solvers)
    phi_t, iters = _predict(state, params, plan, solvers, predictor)
    eta, _ = compute_eta(grid, phi_t, params)
    Leta = apply_Lh(plan, eta)
    k = params.mobility * params.dt
    solver = solvers.get(2.0 / 3.0 * k * params.epsilon**2)

    beta = ((4.0 * state.r - state.r_prev) / 3.0
            - 2.0 / 3.0 * grid.inner(eta, state.phi)
            + 1.0 / 6.0 * grid.inner(eta, state.phi_prev))
    g = (4.0 * state.phi - state.phi_prev) / 3.0 - 2.0 / 3.0 * k * beta * Leta
    p, it_p = solver.solve(g, x0=phi_t)
    q, it_q = solver.solve(Leta, x0=state.q_guess)
    theta = grid.inner(eta, q)
    denom = 1.0 + k * theta / 3.0
    if not denom > 0:
        raise InvariantViolation(f"scalar reduction denominator {denom:.3e} <= 0")
    c = grid.inner(eta, p) / denom
    phi_new = p - k / 3.0 * c * q
    r_new = ((4.0 * state.r - state.r_prev) / 3.0
             + grid.inner(eta, 3.0 * phi_new - 4.0 * state.phi + state.phi_prev) / 6.0)

    new, sample = _finish(grid, plan, params, state, phi_new, r_new,
                          iters + it_p + it_q, theta, "sav2")
    new.q_guess = q
    return new, sample


def bootstrap(state0: SavState, params: SavParams, plan: ConvolutionPlan, solvers=None):
    """Produce the second time level for BDF2 with one first-order step.

    Returns ``(state, sample)``; the sample carries the BDF2 energy of the
    new window, which is not checked for monotonicity on this step.
    """
    p = replace(params, check_energy=False)
    new, sample = sav1_step(state0, p, plan, solvers, predictor="solve")
    energies = compute_energies(new, params, plan, "sav2")
    return new, replace(energies, cg_iterations=sample.cg_iterations, theta=sample.theta)


def compute_energies(state: SavState, params: SavParams, plan: ConvolutionPlan,
                     scheme: str = "sav1") -> EnergySample:
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    grid = plan.grid
    eps2 = params.epsilon**2
    phi = state.phi
    nonlocal_part = 0.5 * eps2 * grid.inner(apply_Lh(plan, phi), phi)
    E1 = grid.integrate(params.potential.F(phi))
    if scheme == "sav1":
        modified = nonlocal_part + state.r**2
    else:
        psi = 2.0 * phi - state.phi_prev
        modified = (nonlocal_part + 0.5 * eps2 * grid.inner(apply_Lh(plan, psi), psi)
                    + state.r**2 + (2.0 * state.r - state.r_prev) ** 2)
    return EnergySample(
        step=state.step,
        t=state.t,
        mass=grid.integrate(phi),
        r=state.r,
        sqrtE1C0=math.sqrt(max(E1 + params.C0, 0.0)),
        modified_energy=float(modified),
        original_energy=float(E1 + nonlocal_part),
    )


def scheme_residuals(old: SavState, new: SavState, phi_tilde: np.ndarray,
                     params: SavParams, plan: ConvolutionPlan, scheme: str):
    """Relative residuals of the discrete equations at a computed step.

    Substitutes ``(phi^{n+1}, r^{n+1})`` into the phase equation (with
    ``mu = eps^2 L_h phi + r eta``) and the ``r`` equation directly, without
    the two-solve reduction.  Each residual is divided by the sum of the
    norms of the terms it is made of.  Returns ``(phase, aux)``.
    """
    grid = plan.grid
    eta, _ = compute_eta(grid, phi_tilde, params)
    k = params.mobility * params.dt
    eps2 = params.epsilon**2
    LLphi = apply_Lh(plan, apply_Lh(plan, new.phi))
    Leta = apply_Lh(plan, eta)
    Lmu = eps2 * LLphi + new.r * Leta
    if scheme == "sav1":
        a, b, z, dt_factor = 1.0, 1.0, 0.0, 1.0
    else:
        a, b, z, dt_factor = 3.0, 4.0, 1.0, 2.0
    incr = a * new.phi - b * old.phi + z * old.phi_prev
    res = incr + dt_factor * k * Lmu
    scale = (a * grid.norm(new.phi) + grid.norm(b * old.phi - z * old.phi_prev)
             + dt_factor * k * (eps2 * grid.norm(LLphi) + abs(new.r) * grid.norm(Leta)))
    phase = grid.norm(res) / scale

    r_incr = a * new.r - b * old.r + z * old.r_prev
    coupling = 0.5 * grid.inner(eta, incr)
    aux_scale = a * abs(new.r) + b * abs(old.r) + z * abs(old.r_prev) + abs(coupling)
    aux = abs(r_incr - coupling) / aux_scale
    return phase, aux
