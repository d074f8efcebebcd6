"""Convex relaxations of feed-forward network robustness queries.

Hidden units become stages in layer-major order.  Each unit is sandwiched
between its activation (convex: ReLU or SoftPlus) and a chord over the
interval-bound-propagation range of its pre-activation.  A final affine
layer without activation is folded into the linear margin objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from ..core import Box, StageBlock, StagewiseProblem

__all__ = [
    "ACTIVATIONS", "DenseLayer", "NetworkSpec", "VerificationQuery", "StageBounds", "HullValues",
    "ibp", "relu_hull", "softplus_hull", "softplus", "network_forward",
    "VerificationProblem", "build_verification_problem", "random_network",
]

ACTIVATIONS = ("relu", "softplus", "none")


@dataclass(frozen=True)
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.bias, dtype=np.float64))
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias length {b.size} does not match {w.shape[0]} output units")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("weights and biases must be finite")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[DenseLayer, ...]
    input_dim: int
    softplus_beta: float = 1.0

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("network has no layers")
        width = int(self.input_dim)
        for k, layer in enumerate(layers):
            if layer.in_dim != width:
                raise ValueError(f"layer {k} expects {layer.in_dim} inputs, previous layer gives {width}")
            width = layer.out_dim
        if self.softplus_beta <= 0:
            raise ValueError("softplus_beta must be positive")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_dim", int(self.input_dim))

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def __eq__(self, other):
        if not isinstance(other, NetworkSpec):
            return NotImplemented
        return (self.input_dim == other.input_dim and self.softplus_beta == other.softplus_beta
                and len(self.layers) == len(other.layers)
                and all(a.activation == b.activation and np.array_equal(a.weights, b.weights)
                        and np.array_equal(a.bias, b.bias)
                        for a, b in zip(self.layers, other.layers)))

    __hash__ = None


@dataclass(frozen=True)
class VerificationQuery:
    center: np.ndarray
    epsilon: float
    true_label: int
    target_label: Optional[int] = None
    clamp: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=np.float64))
        if not np.all(np.isfinite(c)):
            raise ValueError("query center must be finite")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")
        if self.target_label is not None and self.target_label == self.true_label:
            raise ValueError("target_label must differ from true_label")
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        if self.clamp is not None:
            object.__setattr__(self, "clamp", (float(self.clamp[0]), float(self.clamp[1])))
        self.input_box()

    def input_box(self) -> Box:
        lo = self.center - self.epsilon
        hi = self.center + self.epsilon
        if self.clamp is not None:
            lo = np.maximum(lo, self.clamp[0])
            hi = np.minimum(hi, self.clamp[1])
        if np.any(lo > hi):
            raise ValueError("query box is empty after clamping")
        return Box(lo, hi)

    def __eq__(self, other):
        if not isinstance(other, VerificationQuery):
            return NotImplemented
        return (np.array_equal(self.center, other.center) and self.epsilon == other.epsilon
                and self.true_label == other.true_label
                and self.target_label == other.target_label and self.clamp == other.clamp)

    __hash__ = None


@dataclass(frozen=True)
class StageBounds:
    """Pre-activation bounds flattened to stage order, plus per-layer detail.

    ``layer_lower[k]`` / ``layer_upper[k]`` cover every layer including a
    folded output layer; ``l`` / ``u`` only the layers that became stages.
    """

    l: np.ndarray
    u: np.ndarray
    layer_lower: Tuple[np.ndarray, ...] = field(default=(), repr=False)
    layer_upper: Tuple[np.ndarray, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if np.any(self.l > self.u):
            raise ValueError("lower bound exceeds upper bound")


def softplus(a, beta: float = 1.0):
    return np.logaddexp(0.0, beta * np.asarray(a, dtype=np.float64)) / beta


def _activate(a, activation, beta):
    if activation == "relu":
        return np.maximum(a, 0.0)
    if activation == "softplus":
        return softplus(a, beta)
    return a


def _staged_layers(network: NetworkSpec) -> int:
    """Number of leading layers that become stages."""
    if network.layers[-1].activation == "none":
        return len(network.layers) - 1
    return len(network.layers)


def ibp(network: NetworkSpec, input_box) -> StageBounds:
    """Interval bound propagation through every layer."""
    if isinstance(input_box, Box):
        lo, hi = input_box.lower, input_box.upper
    else:
        lo, hi = (np.asarray(v, dtype=np.float64) for v in input_box)
    if lo.shape != (network.input_dim,) or hi.shape != lo.shape:
        raise ValueError("input box does not match the network input dimension")
    if np.any(lo > hi):
        raise ValueError("input box is empty")
    lowers, uppers = [], []
    for layer in network.layers:
        w_pos = np.maximum(layer.weights, 0.0)
        w_neg = np.minimum(layer.weights, 0.0)
        pre_lo = w_pos @ lo + w_neg @ hi + layer.bias
        pre_hi = w_pos @ hi + w_neg @ lo + layer.bias
        # Roundoff can only matter for a degenerate box.
        pre_hi = np.maximum(pre_hi, pre_lo)
        lowers.append(pre_lo)
        uppers.append(pre_hi)
        lo = _activate(pre_lo, layer.activation, network.softplus_beta)
        hi = _activate(pre_hi, layer.activation, network.softplus_beta)
    k = _staged_layers(network)
    return StageBounds(
        l=np.concatenate(lowers[:k]) if k else np.zeros(0),
        u=np.concatenate(uppers[:k]) if k else np.zeros(0),
        layer_lower=tuple(lowers), layer_upper=tuple(uppers),
    )


class HullValues(NamedTuple):
    mu: np.ndarray
    eta: np.ndarray
    dmu_da: np.ndarray
    deta_da: np.ndarray


def _check_interval(l, u):
    if np.any(l > u):
        raise ValueError("hull needs l <= u")


def relu_upper_line(l, u) -> Tuple[np.ndarray, np.ndarray]:
    """Slope and intercept of the ReLU upper boundary over ``[l, u]``."""
    l = np.asarray(l, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    _check_interval(l, u)
    active = l >= 0.0
    dead = (~active) & (u <= 0.0)
    mixed = ~(active | dead)
    slope = np.where(active, 1.0, 0.0)
    denom = np.where(mixed, u - l, 1.0)
    slope = np.where(mixed, u / denom, slope)
    intercept = np.where(mixed, -slope * l, 0.0)
    return slope, intercept


def relu_hull(a, l, u) -> HullValues:
    """Triangle relaxation of ReLU at pre-activation ``a`` with bounds ``[l, u]``.

    The derivative of the lower boundary at ``a == 0`` is taken as 0.
    """
    a = np.asarray(a, dtype=np.float64)
    slope, intercept = relu_upper_line(l, u)
    return HullValues(
        mu=np.maximum(a, 0.0),
        eta=slope * a + intercept,
        dmu_da=(a > 0.0).astype(np.float64),
        deta_da=np.broadcast_to(slope, a.shape).astype(np.float64),
    )


def softplus_upper_line(l, u, beta: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    l = np.asarray(l, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    _check_interval(l, u)
    sl, su = softplus(l, beta), softplus(u, beta)
    wide = u > l
    slope = np.where(wide, (su - sl) / np.where(wide, u - l, 1.0), 0.0)
    return slope, sl - slope * l


def softplus_hull(a, l, u, beta: float = 1.0) -> HullValues:
    """SoftPlus below, chord through the interval endpoints above."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    a = np.asarray(a, dtype=np.float64)
    slope, intercept = softplus_upper_line(l, u, beta)
    return HullValues(
        mu=softplus(a, beta),
        eta=slope * a + intercept,
        dmu_da=expit(beta * a),
        deta_da=np.broadcast_to(slope, a.shape).astype(np.float64),
    )


def network_forward(network: NetworkSpec, x) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Exact network evaluation; returns ``(output, pre_activations_per_layer)``."""
    h = np.asarray(x, dtype=np.float64)
    pres = []
    for layer in network.layers:
        a = layer.weights @ h + layer.bias
        pres.append(a)
        h = _activate(a, layer.activation, network.softplus_beta)
    return h, pres


class VerificationProblem(StagewiseProblem):
    """Relaxed margin ``(v_true - v_target) . z`` over the query box.

    A positive optimum (so any positive dual bound) certifies that no input
    in the box makes the target logit reach the true one.
    """

    def __init__(self, network: NetworkSpec, query: VerificationQuery, target_label: int):
        if not 0 <= query.true_label < network.output_dim:
            raise ValueError("true_label out of range")
        if not 0 <= target_label < network.output_dim or target_label == query.true_label:
            raise ValueError("invalid target label")
        if query.center.shape != (network.input_dim,):
            raise ValueError("query center does not match the network input dimension")
        s_box = query.input_box()
        bounds = ibp(network, s_box)
        n_staged = _staged_layers(network)
        if n_staged == 0:
            raise ValueError("network has no hidden units to relax")
        beta = network.softplus_beta

        layers = []
        z_lo, z_hi, blocks = [], [], []
        start = 0
        for k in range(n_staged):
            layer = network.layers[k]
            l, u = bounds.layer_lower[k], bounds.layer_upper[k]
            if layer.activation == "relu":
                slope, icpt = relu_upper_line(l, u)
            elif layer.activation == "softplus":
                slope, icpt = softplus_upper_line(l, u, beta)
            else:
                slope, icpt = np.ones_like(l), np.zeros_like(l)
            z_lo.append(_activate(l, layer.activation, beta))
            z_hi.append(_activate(u, layer.activation, beta))
            stop = start + layer.out_dim
            blocks.append((start, stop))
            prev = np.arange(blocks[k - 1][0], blocks[k - 1][1]) if k else np.zeros(0, dtype=int)
            layers.append((layer, slope, icpt, prev))
            start = stop
        super().__init__(network.input_dim, s_box, np.concatenate(z_lo), np.concatenate(z_hi), blocks)

        self.network = network
        self.query = query
        self.true_label = int(query.true_label)
        self.target_label = int(target_label)
        self.bounds = bounds
        self._layers = layers
        last = blocks[-1]
        c = np.zeros(self.n)
        if n_staged < len(network.layers):
            out = network.layers[-1]
            c[last[0]:last[1]] = out.weights[self.true_label] - out.weights[self.target_label]
            self._offset = float(out.bias[self.true_label] - out.bias[self.target_label])
        else:
            c[last[0] + self.true_label] += 1.0
            c[last[0] + self.target_label] -= 1.0
            self._offset = 0.0
        c.setflags(write=False)
        self._c = c
        self._zero_s = np.zeros(self.m)
        self._zero_s.setflags(write=False)

    def objective(self, s, z):
        return float(self._c @ z + self._offset)

    def objective_grad(self, s, z):
        return self._zero_s, self._c

    def evaluate_block(self, k, s, z_prefix):
        layer, slope, icpt, prev = self._layers[k]
        x = s if k == 0 else z_prefix[prev]
        a = layer.weights @ x + layer.bias
        if layer.activation == "relu":
            mu, dmu = np.maximum(a, 0.0), (a > 0.0).astype(np.float64)
        elif layer.activation == "softplus":
            beta = self.network.softplus_beta
            mu, dmu = softplus(a, beta), expit(beta * a)
        else:
            mu, dmu = a, np.ones_like(a)
        eta = slope * a + icpt
        dmu_dx = dmu[:, None] * layer.weights
        deta_dx = slope[:, None] * layer.weights
        a0, b0 = self.blocks[k]
        alt = alt_dx = None
        if layer.activation == "relu":
            # The inactive piece of max(a, 0): 0 where a > 0, a elsewhere.
            alt = np.minimum(a, 0.0)
            alt_dx = (1.0 - dmu)[:, None] * layer.weights
        if k == 0:
            empty = np.zeros((b0 - a0, 0))
            return StageBlock(a0, b0, mu, eta, prev, empty, empty, dmu_ds=dmu_dx, deta_ds=deta_dx,
                              mu_alt=alt, dmu_alt_ds=alt_dx,
                              dmu_alt_dz=None if alt is None else empty)
        return StageBlock(a0, b0, mu, eta, prev, dmu_dx, deta_dx, mu_alt=alt, dmu_alt_dz=alt_dx)

    def pre_activations(self, s, z) -> np.ndarray:
        """Pre-activation of every stage at ``(s, z)``, in stage order."""
        out = []
        for k, (layer, _, _, prev) in enumerate(self._layers):
            x = s if k == 0 else z[prev]
            out.append(layer.weights @ x + layer.bias)
        return np.concatenate(out)

    def ibp_margin_bound(self) -> float:
        """Lower bound on the margin from plain interval arithmetic."""
        lo = self.z_box.lower
        hi = self.z_box.upper
        return float(np.sum(np.where(self._c > 0, self._c * lo, self._c * hi)) + self._offset)


def build_verification_problem(network: NetworkSpec, query: VerificationQuery,
                               target_label: Optional[int] = None) -> VerificationProblem:
    target = query.target_label if target_label is None else target_label
    if target is None:
        raise ValueError("a target label is required (on the query or as an argument)")
    return VerificationProblem(network, query, int(target))


def random_network(rng: np.random.Generator, input_dim: int, hidden: Sequence[int], classes: int,
                   activation: str = "relu", softplus_beta: float = 1.0) -> NetworkSpec:
    """He-scaled random dense network with a linear output layer."""
    dims = [int(input_dim)] + [int(h) for h in hidden]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        b = rng.normal(0.0, 0.1, size=fan_out)
        layers.append(DenseLayer(w, b, activation))
    w = rng.normal(0.0, np.sqrt(1.0 / dims[-1]), size=(int(classes), dims[-1]))
    layers.append(DenseLayer(w, rng.normal(0.0, 0.1, size=int(classes)), "none"))
    return NetworkSpec(tuple(layers), int(input_dim), softplus_beta)
