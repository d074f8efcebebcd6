"""Concrete stagewise problems."""

from .isotonic import IsotonicProblem, IsotonicSpec, build_isotonic_problem
from .network import (
    DenseLayer,
    NetworkSpec,
    StageBounds,
    VerificationProblem,
    VerificationQuery,
    build_verification_problem,
    ibp,
    network_forward,
    random_network,
    relu_hull,
    softplus,
    softplus_hull,
)
from .toy import build_chain_problem, build_parabola_problem

__all__ = [
    "IsotonicProblem", "IsotonicSpec", "build_isotonic_problem",
    "DenseLayer", "NetworkSpec", "StageBounds", "VerificationProblem", "VerificationQuery",
    "build_verification_problem", "ibp", "network_forward", "random_network",
    "relu_hull", "softplus", "softplus_hull",
    "build_chain_problem", "build_parabola_problem",
]
