"""Stagewise convex optimization via a box-constrained nonconvex reformulation.

The solver works on ``(s, theta)`` with ``theta in [0, 1]^n`` and reports a
primal value together with a certified lower bound at every iterate.
"""

from .core import (Box, DualityCertificate, EvaluationError, ForwardTrace, FunctionalProblem,
                   GradientBundle, Iterate, StageBlock, StagewiseProblem, ValidationReport,
                   Violation, check_stage_convexity, validate_instance)
from .duality import complementarity, duality_gap, lagrangian_gradients
from .engine import backward, forward, multipliers_with_override, psi
from .optim import (FixStatus, SolveConfig, SolveReport, SolveStatus, TraceRecord, compute_C,
                    compute_K, escape_exact_local_min, fix_deg, fista_inner, pgd_step,
                    safe_psi_min, simple_psi_min)

__version__ = "0.1.0"

__all__ = [
    "Box", "DualityCertificate", "EvaluationError", "ForwardTrace", "FunctionalProblem",
    "GradientBundle", "Iterate", "StageBlock", "StagewiseProblem", "ValidationReport", "Violation",
    "check_stage_convexity", "validate_instance",
    "complementarity", "duality_gap", "lagrangian_gradients",
    "backward", "forward", "multipliers_with_override", "psi",
    "FixStatus", "SolveConfig", "SolveReport", "SolveStatus", "TraceRecord", "compute_C",
    "compute_K", "escape_exact_local_min", "fix_deg", "fista_inner", "pgd_step",
    "safe_psi_min", "simple_psi_min",
]
