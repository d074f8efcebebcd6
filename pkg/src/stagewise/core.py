"""Problem interface and value types shared across the solver.

A stagewise problem minimizes ``f(s, z)`` over ``s in S`` subject to
``mu_i(s, z[:i]) <= z_i <= eta_i(s, z[:i])`` for every stage ``i``, with
``mu_i`` convex and ``eta_i`` concave.  Stages are grouped into *blocks*:
contiguous index ranges whose members depend only on earlier blocks, so a
block can be evaluated (and differentiated) in one vectorized call.  Plain
per-stage problems simply use blocks of size one.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "EvaluationError",
    "Box",
    "StageBlock",
    "StagewiseProblem",
    "FunctionalProblem",
    "Iterate",
    "ForwardTrace",
    "GradientBundle",
    "DualityCertificate",
    "Violation",
    "ValidationReport",
    "validate_instance",
    "check_stage_convexity",
]


class EvaluationError(ValueError):
    """An evaluator returned a non-finite value."""

    def __init__(self, message: str, stage: Optional[int] = None):
        super().__init__(message)
        self.stage = stage


def _frozen(x) -> np.ndarray:
    a = np.array(x, dtype=np.float64)
    a.setflags(write=False)
    return a


class Box:
    """Axis-aligned box ``{x : lower <= x <= upper}``."""

    def __init__(self, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        if lower.shape != upper.shape:
            raise ValueError("box bounds must have matching shapes")
        if np.any(lower > upper):
            raise ValueError("empty box: some lower bound exceeds its upper bound")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("box bounds must be finite")
        self.lower = _frozen(lower)
        self.upper = _frozen(upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def project(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=np.float64), self.lower, self.upper)

    def linear_minimizer(self, c) -> np.ndarray:
        """Return ``argmin_{x in box} c . x`` (lower bound wherever ``c >= 0``)."""
        c = np.asarray(c, dtype=np.float64)
        return np.where(c > 0, self.lower, np.where(c < 0, self.upper, self.lower))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def __repr__(self):
        return f"Box(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


@dataclass(frozen=True)
class StageBlock:
    """Values and first derivatives of one block of stages.

    ``dmu_dz`` / ``deta_dz`` are ``(size, len(support))`` Jacobians with respect
    to ``z[support]``; every support index precedes the block.  ``dmu_ds`` /
    ``deta_ds`` are ``(size, m)`` or ``None`` when the block does not depend on
    ``s``.

    A stage whose lower boundary is the pointwise max of two smooth convex
    pieces (ReLU is ``max(a, 0)``) may also report the inactive piece:
    ``mu_alt`` is its value (so ``mu - mu_alt >= 0``) and ``dmu_alt_ds`` /
    ``dmu_alt_dz`` its gradients.  Certificates use it to mix subgradients
    at and near the kink; leaving it ``None`` is always valid.
    """

    start: int
    stop: int
    mu: np.ndarray
    eta: np.ndarray
    support: np.ndarray
    dmu_dz: np.ndarray
    deta_dz: np.ndarray
    dmu_ds: Optional[np.ndarray] = None
    deta_ds: Optional[np.ndarray] = None
    mu_alt: Optional[np.ndarray] = None
    dmu_alt_ds: Optional[np.ndarray] = None
    dmu_alt_dz: Optional[np.ndarray] = None


class StagewiseProblem(ABC):
    """Abstract stagewise convex problem.

    Subclasses provide the objective (value and gradient) and a block
    evaluator.  Instances are treated as immutable once constructed.

    Parameters
    ----------
    m : int
        Dimension of ``s``.
    s_set : object
        Anything with ``project(x)`` and ``linear_minimizer(c)``; a `Box` in
        every shipped instance.
    z_lower, z_upper : array_like
        Box containing every feasible ``z``; required for certificates.
    blocks : sequence of (start, stop)
        Partition of ``range(n)`` into dependency blocks, in order.
    """

    def __init__(self, m: int, s_set, z_lower, z_upper, blocks: Sequence[Tuple[int, int]]):
        self.m = int(m)
        self.s_set = s_set
        z_lower = np.atleast_1d(np.asarray(z_lower, dtype=np.float64))
        z_upper = np.atleast_1d(np.asarray(z_upper, dtype=np.float64)) if z_upper is not None else None
        self.n = int(z_lower.size)
        self.z_box = Box(z_lower, z_upper) if z_upper is not None else None
        self.blocks = tuple((int(a), int(b)) for a, b in blocks)
        expected = 0
        for a, b in self.blocks:
            if a != expected or b <= a:
                raise ValueError("blocks must partition range(n) contiguously")
            expected = b
        if expected != self.n:
            raise ValueError("blocks must cover every stage")
        if self.m < 1:
            raise ValueError("m must be positive")

    @abstractmethod
    def objective(self, s: np.ndarray, z: np.ndarray) -> float:
        """Return ``f(s, z)``."""

    @abstractmethod
    def objective_grad(self, s: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return ``(grad_s f, grad_z f)``."""

    @abstractmethod
    def evaluate_block(self, k: int, s: np.ndarray, z_prefix: np.ndarray) -> StageBlock:
        """Evaluate block ``k`` at ``(s, z[:start])``."""

    def project_s(self, x) -> np.ndarray:
        return self.s_set.project(x)

    def linear_minimizer_s(self, c) -> np.ndarray:
        return self.s_set.linear_minimizer(c)

    @property
    def z_lower(self) -> Optional[np.ndarray]:
        return None if self.z_box is None else self.z_box.lower

    @property
    def z_upper(self) -> Optional[np.ndarray]:
        return None if self.z_box is None else self.z_box.upper

    def default_start(self, theta: float = 0.5) -> "Iterate":
        """Center of ``S`` (projection of the origin for non-box sets), ``theta`` everywhere."""
        s = self.s_set.center if hasattr(self.s_set, "center") else self.project_s(np.zeros(self.m))
        return Iterate(s, np.full(self.n, float(theta)))

    def block_of(self, i: int) -> int:
        for k, (a, b) in enumerate(self.blocks):
            if a <= i < b:
                return k
        raise IndexError(i)


StageFunction = Callable[[np.ndarray, np.ndarray], Tuple[float, float, np.ndarray, np.ndarray, np.ndarray, np.ndarray]]


class FunctionalProblem(StagewiseProblem):
    """Stagewise problem assembled from plain Python callables.

    Each entry of ``stages`` maps ``(s, z_prefix)`` to
    ``(mu, eta, dmu_ds, dmu_dz, deta_ds, deta_dz)`` where the ``dz`` gradients
    have the length of the prefix.  ``objective`` returns ``f`` and
    ``objective_grad`` returns ``(grad_s, grad_z)``.
    """

    def __init__(self, m, s_set, z_lower, z_upper, objective, objective_grad,
                 stages: Sequence[StageFunction]):
        n = len(stages)
        super().__init__(m, s_set, z_lower, z_upper, [(i, i + 1) for i in range(n)])
        if self.n != n:
            raise ValueError("z bounds and stage count disagree")
        self._f = objective
        self._df = objective_grad
        self._stages = tuple(stages)
        self._supports = [np.arange(i) for i in range(n)]

    def objective(self, s, z):
        return float(self._f(s, z))

    def objective_grad(self, s, z):
        gs, gz = self._df(s, z)
        return np.asarray(gs, dtype=np.float64).reshape(self.m), np.asarray(gz, dtype=np.float64).reshape(self.n)

    def evaluate_block(self, k, s, z_prefix):
        mu, eta, dmu_ds, dmu_dz, deta_ds, deta_dz = self._stages[k](s, z_prefix)
        return StageBlock(
            start=k, stop=k + 1,
            mu=np.array([mu], dtype=np.float64),
            eta=np.array([eta], dtype=np.float64),
            support=self._supports[k],
            dmu_dz=np.asarray(dmu_dz, dtype=np.float64).reshape(1, k),
            deta_dz=np.asarray(deta_dz, dtype=np.float64).reshape(1, k),
            dmu_ds=np.asarray(dmu_ds, dtype=np.float64).reshape(1, self.m),
            deta_ds=np.asarray(deta_ds, dtype=np.float64).reshape(1, self.m),
        )


@dataclass(frozen=True)
class Iterate:
    """Point ``(s, theta)`` of the reformulated problem; ``theta`` lies in ``[0, 1]^n``."""

    s: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        s = _frozen(np.atleast_1d(self.s))
        theta = _frozen(np.atleast_1d(self.theta))
        if np.any(theta < 0.0) or np.any(theta > 1.0) or not np.all(np.isfinite(theta)):
            raise ValueError("theta must lie in [0, 1]")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "theta", theta)

    def with_theta(self, theta) -> "Iterate":
        return Iterate(self.s, theta)

    def __eq__(self, other):
        if not isinstance(other, Iterate):
            return NotImplemented
        return np.array_equal(self.s, other.s) and np.array_equal(self.theta, other.theta)

    __hash__ = None


@dataclass(frozen=True)
class ForwardTrace:
    """Result of the forward substitution; ``blocks`` caches derivative data."""

    z: np.ndarray
    mu: np.ndarray
    eta: np.ndarray
    blocks: Tuple[StageBlock, ...] = field(repr=False, default=())

    @property
    def width(self) -> np.ndarray:
        return self.eta - self.mu


@dataclass(frozen=True)
class GradientBundle:
    grad_s: np.ndarray
    grad_theta: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class DualityCertificate:
    primal: float
    gap: float
    dual: float
    relative_gap: float

    @classmethod
    def from_bounds(cls, primal: float, dual: float) -> "DualityCertificate":
        gap = primal - dual
        return cls(primal=float(primal), gap=float(gap), dual=float(dual),
                   relative_gap=float(gap / max(1.0, abs(primal))))


@dataclass(frozen=True)
class Violation:
    kind: str  # "infeasible-stage" | "z-out-of-bounds" | "non-finite" | "convexity"
    stage: Optional[int]
    s: np.ndarray
    theta: np.ndarray
    detail: str = ""


@dataclass
class ValidationReport:
    samples: int
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self):
        return len(self.violations)


def _sample_s(problem: StagewiseProblem, rng: np.random.Generator) -> np.ndarray:
    s_set = problem.s_set
    if hasattr(s_set, "lower") and hasattr(s_set, "upper"):
        lo, hi = s_set.lower, s_set.upper
    elif problem.z_box is not None:
        # No bounding box for S: draw in a box as wide as Z, then project.
        half = 0.5 * float(np.max(problem.z_box.upper - problem.z_box.lower, initial=1.0))
        lo, hi = -half * np.ones(problem.m), half * np.ones(problem.m)
    else:
        lo, hi = -np.ones(problem.m), np.ones(problem.m)
    return problem.project_s(rng.uniform(lo, hi))


def validate_instance(problem: StagewiseProblem, samples: int = 1000, seed: int = 0,
                      tol: float = 1e-9) -> ValidationReport:
    """Empirically check inductive feasibility and the z-box on random points.

    Draws ``samples`` points ``(s, theta)`` uniformly from ``S x [0,1]^n``,
    runs the forward pass and records every stage with ``eta - mu < -tol`` and
    every ``z`` coordinate outside the declared box.  Evaluator failures are
    recorded as violations rather than raised.
    """
    from .engine import forward

    if samples < 1:
        raise ValueError("samples must be at least 1")
    rng = np.random.default_rng(seed)
    report = ValidationReport(samples=samples)
    for _ in range(samples):
        s = _sample_s(problem, rng)
        theta = rng.uniform(0.0, 1.0, problem.n)
        try:
            trace = forward(problem, Iterate(s, theta))
        except EvaluationError as exc:
            report.violations.append(Violation("non-finite", exc.stage, s, theta, str(exc)))
            continue
        width = trace.eta - trace.mu
        for i in np.flatnonzero(width < -tol):
            report.violations.append(Violation(
                "infeasible-stage", int(i), s, theta, f"eta - mu = {width[i]:.3g}"))
        if problem.z_box is not None:
            bad = (trace.z < problem.z_box.lower - tol) | (trace.z > problem.z_box.upper + tol)
            for i in np.flatnonzero(bad):
                report.violations.append(Violation(
                    "z-out-of-bounds", int(i), s, theta, f"z = {trace.z[i]:.6g}"))
    return report


def check_stage_convexity(problem: StagewiseProblem, samples: int = 200, seed: int = 0,
                          tol: float = 1e-9) -> ValidationReport:
    """Sampled midpoint test: ``mu_i`` convex and ``eta_i`` concave in ``(s, z[:i])``.

    Endpoints are forward-pass points so the stage evaluators are exercised on
    the region where they are meant to be used.
    """
    from .engine import forward

    rng = np.random.default_rng(seed)
    report = ValidationReport(samples=samples)
    for _ in range(samples):
        pa = Iterate(_sample_s(problem, rng), rng.uniform(0, 1, problem.n))
        pb = Iterate(_sample_s(problem, rng), rng.uniform(0, 1, problem.n))
        za, zb = forward(problem, pa).z, forward(problem, pb).z
        sm, zm = 0.5 * (pa.s + pb.s), 0.5 * (za + zb)
        for k, (a, b) in enumerate(problem.blocks):
            ba = problem.evaluate_block(k, pa.s, za[:a])
            bb = problem.evaluate_block(k, pb.s, zb[:a])
            bm = problem.evaluate_block(k, sm, zm[:a])
            mu_gap = bm.mu - 0.5 * (ba.mu + bb.mu)
            eta_gap = 0.5 * (ba.eta + bb.eta) - bm.eta
            for j in np.flatnonzero((mu_gap > tol) | (eta_gap > tol)):
                report.violations.append(Violation(
                    "convexity", a + int(j), sm, 0.5 * (pa.theta + pb.theta),
                    f"mu excess {mu_gap[j]:.3g}, eta excess {eta_gap[j]:.3g}"))
    return report
