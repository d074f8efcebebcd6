"""Small analytic instances: the one-stage parabola and the hard chain."""

from __future__ import annotations

import numpy as np

from ..core import Box, FunctionalProblem

__all__ = ["build_parabola_problem", "build_chain_problem"]


def build_parabola_problem(s_bound: float = 1.0) -> FunctionalProblem:
    """``min z`` s.t. ``s^2 - 1 <= z <= 1 - s^2``, ``s in [-s_bound, s_bound]``.

    The optimum is ``-1`` at ``s = 0``.  With ``s_bound > 1`` the stage
    becomes infeasible for ``|s| > 1``.
    """
    s_bound = float(s_bound)
    z_extent = max(1.0, abs(s_bound ** 2 - 1.0))

    def stage(s, z_prefix):
        x = s[0]
        return (x * x - 1.0, 1.0 - x * x,
                np.array([2.0 * x]), np.zeros(0),
                np.array([-2.0 * x]), np.zeros(0))

    return FunctionalProblem(
        m=1,
        s_set=Box([-s_bound], [s_bound]),
        z_lower=[-z_extent], z_upper=[z_extent],
        objective=lambda s, z: z[0],
        objective_grad=lambda s, z: (np.zeros(1), np.ones(1)),
        stages=[stage],
    )


def build_chain_problem(n: int) -> FunctionalProblem:
    """Chain ``min -x_n`` s.t. ``x_1 in [0, 1]``, ``-1 <= x_i <= x_{i-1}``.

    ``s`` is ``x_1`` and the ``n - 1`` stages are ``x_2, ..., x_n``; the
    optimum ``-1`` is attained at ``x = 1``.
    """
    n = int(n)
    if n < 2:
        raise ValueError("chain needs n >= 2")
    stages_n = n - 1

    def first(s, z_prefix):
        return -1.0, s[0], np.zeros(1), np.zeros(0), np.ones(1), np.zeros(0)

    def make_stage(i):
        e = np.zeros(i)
        e[i - 1] = 1.0
        zero = np.zeros(i)

        def stage(s, z_prefix):
            return -1.0, z_prefix[i - 1], np.zeros(1), zero, np.zeros(1), e

        return stage

    grad_z = np.zeros(stages_n)
    grad_z[-1] = -1.0
    return FunctionalProblem(
        m=1,
        s_set=Box([0.0], [1.0]),
        z_lower=-np.ones(stages_n), z_upper=np.ones(stages_n),
        objective=lambda s, z: -z[-1],
        objective_grad=lambda s, z: (np.zeros(1), grad_z),
        stages=[first] + [make_stage(i) for i in range(1, stages_n)],
    )
