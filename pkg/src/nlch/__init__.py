"""Nonlocal Cahn-Hilliard solver with SAV time stepping and FFT convolutions."""

from .grid import DOUBLE_WELL, Grid, GridError, make_grid, weighted_inner, weighted_norm
from .kernel import Gaussian, Tabulated, apply_A, apply_Lh, build_plan, conv_apply, plan_for
from .krylov import CgConfig, FastSolver, DirectSolver, SolverError, cg_solve, make_solver
from .sav import SavParams, SavState, bootstrap, init_state, sav1_step, sav2_step

__version__ = "0.1.0"

__all__ = [
    "DOUBLE_WELL", "Grid", "GridError", "make_grid", "weighted_inner", "weighted_norm",
    "Gaussian", "Tabulated", "apply_A", "apply_Lh", "build_plan", "conv_apply", "plan_for",
    "CgConfig", "FastSolver", "DirectSolver", "SolverError", "cg_solve", "make_solver",
    "SavParams", "SavState", "bootstrap", "init_state", "sav1_step", "sav2_step",
]
