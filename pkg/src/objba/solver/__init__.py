from .linear import back_substitute, schur_reduce, solve_dense, solve_dense_spd, solve_schur
from .lm import (LMConfig, SolveError, SolveStats, apply_update, levenberg_marquardt, marginal_covariance,
                 reduced_covariance)
from .probe import complexity_probe, format_table, synthetic_system
from .system import (AssemblyError, BlockLayout, BlockSparseSystem, LinearizationPlan, SingularBlockError,
                     assemble, batch_cost, dense_jacobian, linearize)

__all__ = [
    "AssemblyError", "BlockLayout", "BlockSparseSystem", "LMConfig", "LinearizationPlan",
    "SingularBlockError", "SolveError", "SolveStats", "apply_update", "assemble", "back_substitute",
    "batch_cost", "complexity_probe", "dense_jacobian", "format_table", "levenberg_marquardt",
    "linearize", "marginal_covariance", "reduced_covariance", "schur_reduce", "solve_dense", "solve_dense_spd",
    "solve_schur", "synthetic_system",
]
