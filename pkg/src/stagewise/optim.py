"""First-order solvers for the box-constrained reformulation.

`simple_psi_min` runs certificate-checked descent; `safe_psi_min` adds the
degeneracy repair step (`fix_deg`) that flips ``theta`` on stages where the
multiplier sign makes the current ``theta`` a trap.  Descent steps are FISTA
with backtracking, safeguarded so every accepted step decreases ``psi_0`` at
least as much as plain projected gradient from the current iterate.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import optimize

from .core import (DualityCertificate, EvaluationError, ForwardTrace, GradientBundle, Iterate,
                   StagewiseProblem)
from .duality import duality_gap
from .engine import backward, forward, objective_value

__all__ = [
    "SolveConfig", "SolveStatus", "FixStatus", "TraceRecord", "SolveReport", "FistaState",
    "FixDegResult", "pgd_step", "degeneracy_measure", "compute_K", "compute_C",
    "escape_exact_local_min", "fix_deg", "fista_inner", "simple_psi_min", "safe_psi_min",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolveConfig:
    max_iters: int = 50
    epsilon: float = 1e-6
    relative_epsilon: float = 1e-2
    init_step: float = 100.0
    backtrack: float = 0.8
    growth: float = 1.5
    min_step: float = 1e-5
    max_step: float = 1e8
    q_init: float = 1.0
    q_factor: float = 10.0
    use_momentum: bool = True
    gamma: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if not 0.0 < self.backtrack < 1.0 < self.growth:
            raise ValueError("need 0 < backtrack < 1 < growth")
        if not 0.0 < self.min_step <= self.init_step <= self.max_step:
            raise ValueError("need 0 < min_step <= init_step <= max_step")
        if self.q_init <= 0 or self.q_factor <= 1:
            raise ValueError("need q_init > 0 and q_factor > 1")


class SolveStatus(str, enum.Enum):
    CONVERGED = "converged"
    ITERATION_LIMIT = "iteration_limit"


class FixStatus(str, enum.Enum):
    SUCCESS = "SUCCESS"
    FAILURE = "FAILURE"


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    primal: float
    dual: float
    gap: float
    step_size: float
    wall_time: float
    fixdeg_invoked: bool = False
    q: float = 1.0
    degenerate: int = 0


@dataclass
class SolveReport:
    best_iterate: Iterate
    certificate: DualityCertificate
    iterations: int
    status: SolveStatus
    trace: List[TraceRecord] = field(default_factory=list)
    final_iterate: Optional[Iterate] = None
    fixdeg_calls: int = 0
    q: float = 1.0

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED


def pgd_step(problem: StagewiseProblem, iterate: Iterate, grads: GradientBundle,
             step: float) -> Tuple[Iterate, float]:
    """Projected gradient step; returns the new point and the model decrease.

    ``delta = -(grad . d + |d|^2 / (2 step))`` for the realized ``d``, which is
    the minimum progress guaranteed when ``1 / step`` bounds the curvature.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    s_new = problem.project_s(iterate.s - step * grads.grad_s)
    th_new = np.clip(iterate.theta - step * grads.grad_theta, 0.0, 1.0)
    ds = s_new - iterate.s
    dth = th_new - iterate.theta
    delta = -(grads.grad_s @ ds + grads.grad_theta @ dth + (ds @ ds + dth @ dth) / (2.0 * step))
    return Iterate(s_new, th_new), max(float(delta), 0.0)


def degeneracy_measure(theta, y) -> np.ndarray:
    """``theta_i y_i^+ + (1 - theta_i) y_i^-`` with ``y^- = max(-y, 0)``."""
    theta = np.asarray(theta)
    y = np.asarray(y)
    return theta * np.maximum(y, 0.0) + (1.0 - theta) * np.maximum(-y, 0.0)


def compute_K(problem, iterate: Iterate, trace: ForwardTrace, grads: GradientBundle,
              gamma: float = 0.0) -> np.ndarray:
    """Indices with ``eta_i - mu_i <= gamma`` and a positive degeneracy measure."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    r = degeneracy_measure(iterate.theta, grads.y)
    return np.flatnonzero((trace.eta - trace.mu <= gamma) & (r > 0.0))


def compute_C(problem, iterate: Iterate, trace: ForwardTrace, grads: GradientBundle,
              q: float) -> np.ndarray:
    """Indices whose degeneracy measure exceeds ``2 q (eta_i - mu_i)``."""
    if q <= 0:
        raise ValueError("q must be positive")
    r = degeneracy_measure(iterate.theta, grads.y)
    return np.flatnonzero(r > 2.0 * q * (trace.eta - trace.mu))


def _flip_sweep(problem, iterate, trace, decide):
    """Reverse sweep computing ``g`` under the partially updated ``theta_hat``.

    ``decide(i, g_i, omega_i)`` returns the new ``theta_hat_i`` or ``None``;
    ``omega_i`` is ``sum_{j > i} |theta_j - theta_hat_j| (eta_j - mu_j)``.
    Stages inside a block never depend on each other, so ``g`` for a whole
    block is final as soon as later blocks have been folded in.
    """
    theta = iterate.theta
    theta_hat = theta.copy()
    width = trace.eta - trace.mu
    _, gz = problem.objective_grad(iterate.s, trace.z)
    acc = np.array(gz, dtype=np.float64, copy=True)
    g = np.empty(problem.n)
    omega = 0.0
    for k in range(len(problem.blocks) - 1, -1, -1):
        a, b = problem.blocks[k]
        blk = trace.blocks[k]
        g[a:b] = acc[a:b]
        for i in range(b - 1, a - 1, -1):
            new = decide(i, g[i], omega)
            if new is not None:
                theta_hat[i] = new
            omega += abs(theta[i] - theta_hat[i]) * width[i]
        if blk.support.size:
            gb = g[a:b]
            th = theta_hat[a:b]
            acc[blk.support] += (gb * th) @ blk.deta_dz + (gb * (1.0 - th)) @ blk.dmu_dz
    return theta_hat, g, omega


def escape_exact_local_min(problem: StagewiseProblem, iterate: Iterate,
                           trace: ForwardTrace) -> Iterate:
    """Move along exactly degenerate stages so that ``K_0`` becomes empty.

    Works from the last stage backwards; the stage test at ``i`` uses the
    original ``theta_i`` with the already-updated downstream ``theta_hat``.
    ``z`` is left unchanged because only stages with ``eta_i == mu_i`` move.
    """
    theta = iterate.theta
    width = trace.eta - trace.mu

    def decide(i, gi, omega):
        if width[i] > 0.0:
            return None
        r = theta[i] * max(gi, 0.0) + (1.0 - theta[i]) * max(-gi, 0.0)
        if r > 0.0:
            assert gi != 0.0
            return 0.0 if gi > 0.0 else 1.0
        return None

    theta_hat, _, _ = _flip_sweep(problem, iterate, trace, decide)
    return iterate.with_theta(theta_hat)


@dataclass(frozen=True)
class FixDegResult:
    candidate: Iterate
    status: FixStatus
    v: float
    omega0: float = 0.0
    flipped: Tuple[int, ...] = ()
    trace: Optional[ForwardTrace] = field(default=None, repr=False)
    grads: Optional[GradientBundle] = field(default=None, repr=False)

    def __iter__(self):
        return iter((self.candidate, self.status, self.v))


def fix_deg(problem: StagewiseProblem, iterate: Iterate, trace: ForwardTrace, q: float,
            tol: float = 1e-12) -> FixDegResult:
    """Degeneracy repair with a sufficient-decrease and multiplier-prediction check.

    ``tol`` (relative to the magnitudes involved) absorbs roundoff in the two
    acceptance tests; with exactly degenerate stages both would otherwise
    hinge on last-bit equality.
    """
    if q <= 0:
        raise ValueError("q must be positive")
    theta = iterate.theta
    width = trace.eta - trace.mu
    v = 0.0
    flipped = []

    def decide(i, gi, omega):
        nonlocal v
        p = max(gi, 0.0) * theta[i] + max(-gi, 0.0) * (1.0 - theta[i])
        if p > 2.0 * q * (omega + width[i]):
            v += 0.5 * p * width[i]
            flipped.append(i)
            return 0.0 if gi > 0.0 else 1.0
        return None

    theta_hat, g, omega0 = _flip_sweep(problem, iterate, trace, decide)
    candidate = iterate.with_theta(theta_hat)
    psi_old = objective_value(problem, iterate, trace)
    trace_hat = forward(problem, candidate)
    psi_new = objective_value(problem, candidate, trace_hat)
    if psi_new > psi_old - v + tol * max(1.0, abs(psi_old)):
        return FixDegResult(iterate, FixStatus.FAILURE, v, omega0, tuple(flipped), trace, None)
    grads_hat = backward(problem, candidate, trace_hat)
    slack = q * omega0 + tol * np.maximum(1.0, np.abs(g))
    status = FixStatus.SUCCESS if np.all(np.abs(g - grads_hat.y) <= slack) else FixStatus.FAILURE
    return FixDegResult(candidate, status, v, omega0, tuple(flipped), trace_hat, grads_hat)


@dataclass(frozen=True)
class FistaState:
    """Momentum sequence and step size carried between descent steps."""

    step: float
    t: float = 1.0
    momentum: Optional[Iterate] = None
    safeguarded: bool = False
    cache: Optional[Tuple[Iterate, ForwardTrace, float]] = field(default=None, repr=False)

    @classmethod
    def initial(cls, iterate: Iterate, step: float) -> "FistaState":
        return cls(step=step, t=1.0, momentum=iterate)

    def reset(self, iterate: Iterate) -> "FistaState":
        return replace(self, t=1.0, momentum=iterate, cache=None)


def _evaluate(problem, iterate):
    try:
        trace = forward(problem, iterate)
        return trace, objective_value(problem, iterate, trace)
    except EvaluationError:
        return None, math.inf


def _line_search(problem, point, grads, psi0, step, config):
    """Shrink ``step`` until the quadratic model at ``point`` majorizes ``psi_0``.

    Returns ``(candidate, trace, psi, step, backtracked, majorized)``; the
    last flag is false when the minimum step was reached without the model
    test passing.
    """
    t = step
    backtracked = False
    tol = 1e-12 * max(1.0, abs(psi0))
    while True:
        cand, delta = pgd_step(problem, point, grads, t)
        ctrace, cpsi = _evaluate(problem, cand)
        if cpsi <= psi0 - delta + tol:
            return cand, ctrace, cpsi, t, backtracked, True
        if t <= config.min_step:
            return cand, ctrace, cpsi, t, backtracked, False
        t = max(t * config.backtrack, config.min_step)
        backtracked = True


def _reduced_gradient(problem, iterate, grads, tau=1e-10):
    """Gradient with components that point out of the feasible set removed."""
    s = problem.project_s(iterate.s - tau * grads.grad_s)
    th = np.clip(iterate.theta - tau * grads.grad_theta, 0.0, 1.0)
    return np.concatenate(((iterate.s - s) / tau, (iterate.theta - th) / tau))


def _min_norm_combination(G: np.ndarray) -> np.ndarray:
    """Minimum-norm point of the convex hull of the columns of ``G``."""
    k = G.shape[1]
    if k == 1:
        return G[:, 0]
    Q = G.T @ G
    res = optimize.minimize(
        lambda w: 0.5 * w @ Q @ w, np.full(k, 1.0 / k), jac=lambda w: Q @ w, method="SLSQP",
        bounds=[(0.0, 1.0)] * k,
        constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1.0, "jac": lambda w: np.ones(k)}],
    )
    w = np.clip(res.x, 0.0, None)
    return G @ (w / w.sum())


def _bundle_step(problem, iterate, grads, psi_x, step, max_bundle=20, min_step=1e-14):
    """Descent step along the min-norm combination of nearby gradients.

    Used only when plain projected gradient stalls.  Gradients are collected
    at trial points along the current search ray (the first ray is plain
    steepest descent, which is known to fail), so the bundle soon spans both
    sides of the kink and its min-norm element points along it.
    Returns ``(next, trace, psi)`` on sufficient decrease, otherwise ``None``.
    """
    m = problem.m
    G = [_reduced_gradient(problem, iterate, grads)]
    for round_ in range(max_bundle + 1):
        d = -_min_norm_combination(np.column_stack(G))
        if not np.linalg.norm(d) > 1e-14:
            return None
        t = step
        fresh = []
        while t >= min_step:
            cand = _project(problem, iterate.s + t * d[:m], iterate.theta + t * d[m:])
            ctrace, cpsi = _evaluate(problem, cand)
            if ctrace is not None:
                moved = np.concatenate((cand.s - iterate.s, cand.theta - iterate.theta))
                if round_ > 0 and cpsi < psi_x - 1e-4 * (moved @ moved) / t:
                    return cand, ctrace, cpsi
                g_new = _reduced_gradient(problem, iterate, backward(problem, cand, ctrace))
                if all(np.linalg.norm(g_new - g) > 1e-9 * (1.0 + np.linalg.norm(g)) for g in G + fresh):
                    fresh.append(g_new)
            t *= 0.1
        if not fresh:
            return None
        G.extend(fresh)
    return None


def _project(problem, s, theta) -> Iterate:
    return Iterate(problem.project_s(s), np.clip(theta, 0.0, 1.0))


def fista_inner(problem: StagewiseProblem, iterate: Iterate, state: FistaState,
                config: SolveConfig, trace: Optional[ForwardTrace] = None,
                grads: Optional[GradientBundle] = None):
    """One safeguarded accelerated step from ``iterate``.

    Returns ``(next, realized_delta, new_state)``.  The accelerated candidate
    (from the momentum point) is kept only if it is no worse than the plain
    projected-gradient candidate from ``iterate``; otherwise the PGD candidate
    is taken and momentum restarts.
    """
    if trace is None:
        trace = forward(problem, iterate)
    if grads is None:
        grads = backward(problem, iterate, trace)
    psi_x = objective_value(problem, iterate, trace)

    y = state.momentum if (config.use_momentum and state.momentum is not None) else iterate
    accel = None
    start_step = state.step
    if y != iterate:
        try:
            ytrace = forward(problem, y)
            ygrads = backward(problem, y, ytrace)
            ypsi = objective_value(problem, y, ytrace)
            accel = _line_search(problem, y, ygrads, ypsi, state.step, config)
            start_step = accel[3]
        except EvaluationError:
            accel = None
    plain = _line_search(problem, iterate, grads, psi_x, start_step, config)

    safeguarded = False
    if accel is not None and accel[2] <= plain[2]:
        chosen, keep_momentum = accel, True
    else:
        chosen = plain
        keep_momentum = accel is None
        safeguarded = accel is not None

    nxt, ntrace, npsi, t_used, backtracked, majorized = chosen
    if not plain[5]:
        # Even the minimum step violates the quadratic model, which happens on
        # kinks of a nonsmooth stage: try a bundle step and keep the better.
        bundled = _bundle_step(problem, iterate, grads, psi_x, max(state.step, 1.0))
        if bundled is not None and bundled[2] < npsi:
            nxt, ntrace, npsi = bundled
            keep_momentum = False
    if not npsi <= psi_x:
        # No progress at all: stay put rather than ascend.
        nxt, ntrace, npsi = iterate, trace, psi_x
        keep_momentum = False
    new_step = min(t_used * config.growth, config.max_step) if not backtracked else t_used

    if config.use_momentum and keep_momentum:
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * state.t * state.t))
        beta = (state.t - 1.0) / t_next
        mom = _project(problem, nxt.s + beta * (nxt.s - iterate.s),
                       nxt.theta + beta * (nxt.theta - iterate.theta))
    else:
        t_next, mom = 1.0, nxt
    new_state = FistaState(step=new_step, t=t_next, momentum=mom, safeguarded=safeguarded,
                           cache=(nxt, ntrace, npsi))
    return nxt, psi_x - npsi, new_state


def simple_psi_min(problem: StagewiseProblem, start: Optional[Iterate] = None,
                   config: Optional[SolveConfig] = None,
                   callback: Optional[Callable[[TraceRecord], None]] = None) -> SolveReport:
    """Certificate-terminated descent on ``psi_0`` without degeneracy repair."""
    return _solve(problem, start, config or SolveConfig(), safe=False, callback=callback)


def safe_psi_min(problem: StagewiseProblem, start: Optional[Iterate] = None,
                 config: Optional[SolveConfig] = None,
                 callback: Optional[Callable[[TraceRecord], None]] = None) -> SolveReport:
    """Descent on ``psi_0`` that calls `fix_deg` whenever ``C(s, theta, q)`` is nonempty."""
    return _solve(problem, start, config or SolveConfig(), safe=True, callback=callback)


def _solve(problem, start, config, safe, callback):
    x = start if start is not None else problem.default_start()
    t0 = time.perf_counter()
    q = float(config.q_init)
    state = FistaState.initial(x, config.init_step)
    trace = forward(problem, x)
    grads = backward(problem, x, trace)

    records: List[TraceRecord] = []
    best_primal, best_iterate, best_dual = math.inf, x, -math.inf
    fix_calls = 0
    status = SolveStatus.ITERATION_LIMIT
    k = 0
    while True:
        invoked = False
        if safe and compute_C(problem, x, trace, grads, q).size:
            invoked = True
            fix_calls += 1
            res = fix_deg(problem, x, trace, q)
            log.debug("iter %d: fix_deg q=%g status=%s flipped=%s", k, q, res.status.value,
                      list(res.flipped))
            if res.status is FixStatus.FAILURE:
                q *= config.q_factor
            if res.candidate != x:
                x = res.candidate
                trace = res.trace
                grads = res.grads if res.grads is not None else backward(problem, x, trace)
                state = state.reset(x)

        cert = duality_gap(problem, x, trace, grads)
        if cert.primal < best_primal:
            best_primal, best_iterate = cert.primal, x
        best_dual = max(best_dual, cert.dual)
        best = DualityCertificate.from_bounds(best_primal, best_dual)
        record = TraceRecord(
            iter=k, primal=cert.primal, dual=cert.dual, gap=cert.gap, step_size=state.step,
            wall_time=time.perf_counter() - t0, fixdeg_invoked=invoked, q=q,
            degenerate=int(compute_K(problem, x, trace, grads, config.gamma).size),
        )
        records.append(record)
        if callback is not None:
            callback(record)
        log.info("iter %d primal=%.6g dual=%.6g gap=%.3g step=%.3g", k, cert.primal, cert.dual,
                 cert.gap, state.step)

        if best.gap <= config.epsilon or best.relative_gap <= config.relative_epsilon:
            status = SolveStatus.CONVERGED
            break
        if k >= config.max_iters:
            break

        x, _, state = fista_inner(problem, x, state, config, trace, grads)
        cached = state.cache
        trace = cached[1] if cached is not None and cached[0] is x and cached[1] is not None \
            else forward(problem, x)
        grads = backward(problem, x, trace)
        k += 1

    return SolveReport(best_iterate=best_iterate, certificate=best, iterations=k, status=status,
                       trace=records, final_iterate=x, fixdeg_calls=fix_calls, q=q)
