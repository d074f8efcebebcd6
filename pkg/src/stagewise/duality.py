"""Lagrangian gradients and the computable duality gap.

With multipliers ``y`` taken from the reverse sweep, the Lagrangian

    L(s, z, y) = f + sum_i (y_i^+ mu_i - y_i^- eta_i - y_i z_i)

is convex in ``(s, z)``, so its linearization at the current feasible point,
minimized over ``S x Z``, lower-bounds the optimum.  The gap between that
bound and ``f(s, z)`` is

    sum_i (y_i z_i - y_i^+ mu_i + y_i^- eta_i)
        + sup_{(s', z') in S x Z} grad L . (s - s', z - z').
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import optimize

from .core import Box, DualityCertificate, ForwardTrace, GradientBundle, Iterate, StagewiseProblem
from .engine import objective_value

__all__ = ["lagrangian_gradients", "duality_gap", "complementarity", "GapTerms", "gap_terms"]


def lagrangian_gradients(problem: StagewiseProblem, iterate: Iterate, trace: ForwardTrace, y):
    """Return ``(grad_s L, grad_z L)`` at ``(iterate.s, trace.z)``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (problem.n,) or len(trace.blocks) != len(problem.blocks):
        raise ValueError("multiplier/trace dimensions do not match the problem")
    if not np.all(np.isfinite(y)):
        raise ValueError("multipliers must be finite")
    y_pos = np.maximum(y, 0.0)
    y_neg = np.maximum(-y, 0.0)
    gs, gz = problem.objective_grad(iterate.s, trace.z)
    grad_s = np.array(gs, dtype=np.float64, copy=True)
    grad_z = np.array(gz, dtype=np.float64, copy=True)
    for k in range(len(problem.blocks) - 1, -1, -1):
        a, b = problem.blocks[k]
        blk = trace.blocks[k]
        yp, yn = y_pos[a:b], y_neg[a:b]
        if blk.dmu_ds is not None:
            grad_s += yp @ blk.dmu_ds
        if blk.deta_ds is not None:
            grad_s -= yn @ blk.deta_ds
        if blk.support.size:
            grad_z[blk.support] += yp @ blk.dmu_dz - yn @ blk.deta_dz
    grad_z -= y
    return grad_s, grad_z


def complementarity(trace: ForwardTrace, y) -> float:
    """``sum_i y_i z_i - y_i^+ mu_i + y_i^- eta_i`` (nonnegative on feasible points)."""
    y = np.asarray(y)
    return float(np.sum(y * trace.z - np.maximum(y, 0.0) * trace.mu + np.maximum(-y, 0.0) * trace.eta))


class GapTerms(NamedTuple):
    complementarity: float
    s_term: float
    z_term: float
    grad_L_s: np.ndarray
    grad_L_z: np.ndarray


def gap_terms(problem: StagewiseProblem, iterate: Iterate, trace: ForwardTrace, y) -> GapTerms:
    if problem.z_box is None:
        raise ValueError("z-bounds are required to form a duality certificate")
    grad_L_s, grad_L_z = lagrangian_gradients(problem, iterate, trace, y)
    s_star = problem.linear_minimizer_s(grad_L_s)
    s_term = float(grad_L_s @ (iterate.s - s_star))
    # Per-coordinate maximum of grad_z L_i (z_i - z'_i) over z'_i in [lo_i, hi_i].
    lo, hi = problem.z_box.lower, problem.z_box.upper
    z_term = float(np.sum(np.maximum(grad_L_z * (trace.z - lo), grad_L_z * (trace.z - hi))))
    return GapTerms(complementarity(trace, y), s_term, z_term, grad_L_s, grad_L_z)


def _kink_columns(problem, trace, y, budget):
    """Columns ``y_j^+ (grad alt_j - grad mu_j)`` and costs ``y_j^+ (mu_j - alt_j)``.

    Only stages whose cost is below ``budget`` can lower the gap, so the
    rest are skipped.
    """
    m, n = problem.m, problem.n
    cols, costs = [], []
    for k, (a, b) in enumerate(problem.blocks):
        blk = trace.blocks[k]
        if blk.mu_alt is None:
            continue
        yp = np.maximum(y[a:b], 0.0)
        cost = yp * (blk.mu - blk.mu_alt)
        for r in np.flatnonzero((yp > 0.0) & (cost < budget)):
            col = np.zeros(m + n)
            if blk.dmu_ds is not None:
                col[:m] = yp[r] * (blk.dmu_alt_ds[r] - blk.dmu_ds[r])
            if blk.support.size:
                col[m + blk.support] = yp[r] * (blk.dmu_alt_dz[r] - blk.dmu_dz[r])
            cols.append(col)
            costs.append(cost[r])
    if not cols:
        return None, None
    return np.column_stack(cols), np.asarray(costs)


def _row_sup(g, alpha, beta):
    return np.maximum(g * alpha, g * beta)


def _refine_kinks(problem, iterate, trace, y, terms, base_gap):
    """Lower the gap by mixing in the inactive piece of kinked lower boundaries.

    For ``lam_j`` in ``[0, 1]``, ``mu_j >= (1 - lam_j) lin(mu_j) + lam_j lin(alt_j)``
    because both pieces are convex and ``mu_j`` dominates each, so any
    mixture yields a valid bound.  The best mixture solves a small LP.
    """
    S = problem.s_set
    if not isinstance(S, Box):
        return base_gap
    M, c = _kink_columns(problem, trace, y, base_gap)
    if M is None:
        return base_gap
    g0 = np.concatenate((terms.grad_L_s, terms.grad_L_z))
    x0 = np.concatenate((iterate.s, trace.z))
    alpha = x0 - np.concatenate((S.lower, problem.z_box.lower))
    beta = x0 - np.concatenate((S.upper, problem.z_box.upper))
    rows = np.flatnonzero(np.any(M != 0.0, axis=1))
    K, R = M.shape[1], rows.size
    Mr = M[rows]
    # Variables [lam (K), t (R)]: t_r >= alpha_r g_r(lam) and t_r >= beta_r g_r(lam).
    eye = np.eye(R)
    A = np.vstack((np.hstack((alpha[rows, None] * Mr, -eye)),
                   np.hstack((beta[rows, None] * Mr, -eye))))
    b = np.concatenate((-alpha[rows] * g0[rows], -beta[rows] * g0[rows]))
    res = optimize.linprog(np.concatenate((c, np.ones(R))), A_ub=A, b_ub=b,
                           bounds=[(0.0, 1.0)] * K + [(None, None)] * R, method="highs")
    if res.status != 0:
        return base_gap
    lam = np.clip(res.x[:K], 0.0, 1.0)
    g = g0 + M @ lam
    refined = terms.complementarity + float(np.sum(_row_sup(g, alpha, beta))) + float(c @ lam)
    return min(base_gap, refined)


def duality_gap(problem: StagewiseProblem, iterate: Iterate, trace: ForwardTrace,
                grads: GradientBundle) -> DualityCertificate:
    """Primal value, gap and the implied lower bound at ``iterate``.

    Stages that report a second lower-boundary piece (see `StageBlock`)
    additionally get their subgradient mixture optimized.
    """
    terms = gap_terms(problem, iterate, trace, grads.y)
    primal = objective_value(problem, iterate, trace)
    gap = terms.complementarity + terms.s_term + terms.z_term
    if gap > 0.0:
        gap = _refine_kinks(problem, iterate, trace, np.asarray(grads.y), terms, gap)
    return DualityCertificate(primal=primal, gap=gap, dual=primal - gap,
                              relative_gap=gap / max(1.0, abs(primal)))
