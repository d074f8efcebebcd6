"""Forward substitution and reverse-mode gradients of the reformulated objective.

``forward`` maps ``(s, theta)`` to ``z`` with ``z_i = (1 - theta_i) mu_i +
theta_i eta_i``; ``backward`` runs the reverse recursion that yields
``grad_s psi_0``, ``d psi_0 / d theta`` and the stage multipliers
``y_i = d psi_i / d z_i``.  Reverse sweeps always visit blocks in descending
order so results are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from .core import EvaluationError, ForwardTrace, GradientBundle, Iterate, StagewiseProblem

__all__ = ["forward", "backward", "multipliers_with_override", "psi", "objective_value"]


def _check_finite(values: np.ndarray, start: int, what: str):
    if not np.all(np.isfinite(values)):
        bad = start + int(np.flatnonzero(~np.isfinite(values))[0])
        raise EvaluationError(f"non-finite {what} at stage {bad}", stage=bad)


def forward(problem: StagewiseProblem, iterate: Iterate) -> ForwardTrace:
    s, theta = iterate.s, iterate.theta
    if theta.size != problem.n or s.size != problem.m:
        raise ValueError("iterate dimensions do not match the problem")
    n = problem.n
    z = np.empty(n)
    mu = np.empty(n)
    eta = np.empty(n)
    blocks = []
    for k, (a, b) in enumerate(problem.blocks):
        blk = problem.evaluate_block(k, s, z[:a])
        _check_finite(blk.mu, a, "mu")
        _check_finite(blk.eta, a, "eta")
        mu[a:b] = blk.mu
        eta[a:b] = blk.eta
        th = theta[a:b]
        z[a:b] = (1.0 - th) * blk.mu + th * blk.eta
        blocks.append(blk)
    for arr in (z, mu, eta):
        arr.setflags(write=False)
    return ForwardTrace(z=z, mu=mu, eta=eta, blocks=tuple(blocks))


def objective_value(problem: StagewiseProblem, iterate: Iterate, trace: ForwardTrace) -> float:
    value = problem.objective(iterate.s, trace.z)
    if not np.isfinite(value):
        raise EvaluationError("non-finite objective value")
    return float(value)


def psi(problem: StagewiseProblem, iterate: Iterate) -> float:
    """``psi_0(s, theta) = f(s, Forward(s, theta))``."""
    return objective_value(problem, iterate, forward(problem, iterate))


def _reverse_sweep(problem, iterate, trace, theta_used):
    """Shared reverse recursion; returns (acc_s, y) using ``theta_used`` as mixing weights."""
    if len(trace.blocks) != len(problem.blocks) or trace.z.size != problem.n:
        raise ValueError("trace does not match the problem")
    gs, gz = problem.objective_grad(iterate.s, trace.z)
    acc_s = np.array(gs, dtype=np.float64, copy=True)
    acc_z = np.array(gz, dtype=np.float64, copy=True)
    if acc_s.shape != (problem.m,) or acc_z.shape != (problem.n,):
        raise ValueError("objective gradient has the wrong shape")
    y = np.empty(problem.n)
    for k in range(len(problem.blocks) - 1, -1, -1):
        a, b = problem.blocks[k]
        blk = trace.blocks[k]
        yb = acc_z[a:b].copy()
        y[a:b] = yb
        th = theta_used[a:b]
        w_eta = yb * th
        w_mu = yb * (1.0 - th)
        if blk.deta_ds is not None:
            acc_s += w_eta @ blk.deta_ds
        if blk.dmu_ds is not None:
            acc_s += w_mu @ blk.dmu_ds
        if blk.support.size:
            acc_z[blk.support] += w_eta @ blk.deta_dz + w_mu @ blk.dmu_dz
    return acc_s, y


def backward(problem: StagewiseProblem, iterate: Iterate, trace: ForwardTrace) -> GradientBundle:
    grad_s, y = _reverse_sweep(problem, iterate, trace, iterate.theta)
    grad_theta = y * (trace.eta - trace.mu)
    return GradientBundle(grad_s=grad_s, grad_theta=grad_theta, y=y)


def multipliers_with_override(problem: StagewiseProblem, iterate: Iterate, trace: ForwardTrace,
                              theta_hat) -> np.ndarray:
    """Multipliers ``g_i`` of the recursion with downstream weights ``theta_hat``.

    All derivatives stay evaluated at the original ``trace.z``; only the
    mixing weights change.  With ``theta_hat == theta`` this is exactly the
    ``y`` of `backward`.
    """
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    if theta_hat.shape != (problem.n,):
        raise ValueError("theta_hat has the wrong length")
    _, g = _reverse_sweep(problem, iterate, trace, theta_hat)
    return g
