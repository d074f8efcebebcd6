"""Generalized isotonic regression as a stagewise problem.

Each fitted value ``z_i`` must dominate its predecessors in a partial order
and lie in ``[l, u]``.  The hard lower constraint ``max(l, z_j : j < i)`` is
replaced by a log-mean-exp, which is convex and smooth and sits within
``T log k`` *below* the max (``k`` is the number of terms).  Because it
never exceeds the max, every feasible point of the unsmoothed problem stays
feasible, so the smoothed optimum is a lower bound on the exact one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from ..core import Box, StageBlock, StagewiseProblem

__all__ = ["IsotonicSpec", "IsotonicProblem", "build_isotonic_problem"]


@dataclass(frozen=True)
class IsotonicSpec:
    """Data, precedence pairs ``(j, i)`` meaning ``z_j <= z_i``, bounds and temperature."""

    y: np.ndarray
    order: Tuple[Tuple[int, int], ...]
    l: float
    u: float
    temperature: float = 1e-2

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=np.float64))
        if y.ndim != 1 or y.size == 0 or not np.all(np.isfinite(y)):
            raise ValueError("y must be a nonempty finite vector")
        pairs = tuple((int(j), int(i)) for j, i in self.order)
        n = y.size
        for j, i in pairs:
            if not (0 <= j < n and 0 <= i < n):
                raise ValueError(f"order pair ({j}, {i}) out of range")
            if j == i:
                raise ValueError(f"order pair ({j}, {i}) is a self loop")
        if not (np.isfinite(self.l) and np.isfinite(self.u)) or self.l > self.u:
            raise ValueError("bounds must be finite with l <= u")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "order", pairs)
        object.__setattr__(self, "l", float(self.l))
        object.__setattr__(self, "u", float(self.u))
        object.__setattr__(self, "temperature", float(self.temperature))

    @property
    def n(self) -> int:
        return self.y.size

    @classmethod
    def total_order(cls, y, l: float, u: float, temperature: float = 1e-2) -> "IsotonicSpec":
        n = len(y)
        return cls(y, tuple((i - 1, i) for i in range(1, n)), l, u, temperature)

    def __eq__(self, other):
        if not isinstance(other, IsotonicSpec):
            return NotImplemented
        return (np.array_equal(self.y, other.y) and self.order == other.order and self.l == other.l
                and self.u == other.u and self.temperature == other.temperature)

    __hash__ = None


def _find_cycle(n: int, pairs: Sequence[Tuple[int, int]]):
    """Return a node on a cycle of the precedence graph, or ``None``."""
    succ = [[] for _ in range(n)]
    indeg = np.zeros(n, dtype=int)
    for j, i in pairs:
        succ[j].append(i)
        indeg[i] += 1
    stack = [v for v in range(n) if indeg[v] == 0]
    seen = 0
    while stack:
        v = stack.pop()
        seen += 1
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                stack.append(w)
    if seen == n:
        return None
    return int(np.flatnonzero(indeg > 0)[0])


class IsotonicProblem(StagewiseProblem):
    """``min sum (z_i - y_i)^2`` with smoothed isotonic constraints.

    There is no free ``s``; it is a frozen scalar in ``S = {0}``.
    """

    def __init__(self, spec: IsotonicSpec):
        n = spec.n
        bad = _find_cycle(n, spec.order)
        if bad is not None:
            raise ValueError(f"precedence order is cyclic (node {bad} lies on a cycle)")
        if any(j > i for j, i in spec.order):
            raise ValueError("precedence pairs must satisfy j < i (topologically sorted indices)")
        preds = [sorted({j for j, i in spec.order if i == k}) for k in range(n)]
        T = spec.temperature
        counts = np.array([1 + len(p) for p in preds], dtype=np.float64)
        z_lo = spec.l - T * np.log(counts)
        z_hi = np.full(n, spec.u)
        super().__init__(1, Box([0.0], [0.0]), z_lo, z_hi, [(i, i + 1) for i in range(n)])
        self.spec = spec
        self._preds = [np.asarray(p, dtype=int) for p in preds]
        self._log_counts = np.log(counts)
        self._zero_s = np.zeros(1)
        self._zero_s.setflags(write=False)

    def objective(self, s, z):
        r = z - self.spec.y
        return float(r @ r)

    def objective_grad(self, s, z):
        return self._zero_s, 2.0 * (z - self.spec.y)

    def evaluate_block(self, k, s, z_prefix):
        spec = self.spec
        T = spec.temperature
        support = self._preds[k]
        v = np.concatenate(([spec.l], z_prefix[support])) / T
        mu = T * (logsumexp(v) - self._log_counts[k])
        # Clip roundoff so that mu never exceeds the exact maximum.
        mu = min(mu, T * v.max())
        weights = softmax(v)[1:]
        return StageBlock(
            start=k, stop=k + 1,
            mu=np.array([mu]), eta=np.array([spec.u]),
            support=support,
            dmu_dz=weights.reshape(1, -1),
            deta_dz=np.zeros((1, support.size)),
        )


def build_isotonic_problem(spec: IsotonicSpec) -> IsotonicProblem:
    return IsotonicProblem(spec)
