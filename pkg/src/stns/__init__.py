"""Monolithic space-time finite element solver for 2D incompressible flow.

DG(k) discontinuous Galerkin time discretization on slabs, inf-sup stable
Q_{r+1}/P_r^disc spatial pairs with weak (Nitsche) boundary conditions,
solved slab-by-slab with inexact Newton-FGMRES preconditioned by an
hp space-time multigrid V-cycle with cell-wise Vanka smoothing.
"""

from .geometry import build_hierarchy, build_time_partition
from .elements import gauss_radau, gauss_legendre, temporal_basis
from .elements import build_velocity_space, build_pressure_space
from .operators import NitscheConfig, SpatialOperatorSet
from .slab import SlabProblem
from .solver import (
    ForcingConfig,
    NewtonConfig,
    NonConvergenceError,
    fgmres,
    march,
    newton_solve_slab,
)
from .stmg import RebuildConfig, STMGPreconditioner
from .bench import (
    CavityCase2D,
    ManufacturedCase,
    compute_errors,
    run_cavity,
    run_convergence,
)

__version__ = "0.1.0"

__all__ = [
    "build_hierarchy",
    "build_time_partition",
    "gauss_radau",
    "gauss_legendre",
    "temporal_basis",
    "build_velocity_space",
    "build_pressure_space",
    "NitscheConfig",
    "SpatialOperatorSet",
    "SlabProblem",
    "ForcingConfig",
    "NewtonConfig",
    "NonConvergenceError",
    "fgmres",
    "march",
    "newton_solve_slab",
    "RebuildConfig",
    "STMGPreconditioner",
    "CavityCase2D",
    "ManufacturedCase",
    "compute_errors",
    "run_cavity",
    "run_convergence",
    "__version__",
]
