"""JSON readers and writers for networks, queries, isotonic data and bench suites.

Readers raise `FormatError` with a line/column (for syntax errors) or a
field path such as ``layers[1].bias`` (for schema errors).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np

from .instances.isotonic import IsotonicSpec
from .instances.network import ACTIVATIONS, DenseLayer, NetworkSpec, VerificationQuery

__all__ = [
    "FormatError", "BenchSuite",
    "network_to_dict", "network_from_dict", "load_network", "save_network",
    "query_to_dict", "query_from_dict", "load_query", "save_query",
    "isotonic_to_dict", "isotonic_from_dict", "load_isotonic", "save_isotonic",
    "suite_to_dict", "suite_from_dict", "load_suite", "save_suite",
]

PathLike = Union[str, Path]


class FormatError(ValueError):
    """A data file could not be parsed or does not match its schema."""

    def __init__(self, message: str, source: Optional[str] = None):
        self.source = source
        super().__init__(f"{source}: {message}" if source else message)


def _read_json(path: PathLike) -> Any:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"not valid UTF-8 ({exc})", str(path)) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}", str(path)) from exc


def _write_json(obj: Any, path: PathLike) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"{where}: expected a number, got {type(value).__name__}")
    if not math.isfinite(value):
        raise FormatError(f"{where}: value must be finite")
    return float(value)


def _integer(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise FormatError(f"{where}: expected an integer")
    return int(value)


def _vector(value, where: str) -> np.ndarray:
    if not isinstance(value, list):
        raise FormatError(f"{where}: expected a list of numbers")
    return np.array([_number(v, f"{where}[{i}]") for i, v in enumerate(value)], dtype=np.float64)


def _matrix(value, where: str) -> np.ndarray:
    if not isinstance(value, list) or not value:
        raise FormatError(f"{where}: expected a nonempty list of rows")
    rows = [_vector(r, f"{where}[{i}]") for i, r in enumerate(value)]
    width = rows[0].size
    for i, r in enumerate(rows):
        if r.size != width:
            raise FormatError(f"{where}[{i}]: row has {r.size} entries, expected {width}")
    return np.vstack(rows)


def _field(obj, key: str, where: str):
    if not isinstance(obj, dict):
        raise FormatError(f"{where or 'document'}: expected an object")
    if key not in obj:
        raise FormatError(f"{where + '.' if where else ''}{key}: missing field")
    return obj[key]


def _with_source(fn, path: PathLike):
    try:
        return fn(_read_json(path))
    except FormatError as exc:
        if exc.source is None:
            raise FormatError(str(exc), str(path)) from exc
        raise


# Networks --------------------------------------------------------------------

def network_to_dict(network: NetworkSpec) -> dict:
    out = {
        "input_dim": network.input_dim,
        "layers": [{"weights": layer.weights.tolist(), "bias": layer.bias.tolist(),
                    "activation": layer.activation} for layer in network.layers],
    }
    if network.softplus_beta != 1.0:
        out["softplus_beta"] = network.softplus_beta
    return out


def network_from_dict(obj) -> NetworkSpec:
    input_dim = _integer(_field(obj, "input_dim", ""), "input_dim")
    raw_layers = _field(obj, "layers", "")
    if not isinstance(raw_layers, list) or not raw_layers:
        raise FormatError("layers: expected a nonempty list")
    layers = []
    width = input_dim
    for k, raw in enumerate(raw_layers):
        where = f"layers[{k}]"
        w = _matrix(_field(raw, "weights", where), f"{where}.weights")
        b = _vector(_field(raw, "bias", where), f"{where}.bias")
        act = raw.get("activation", "relu")
        if act not in ACTIVATIONS:
            raise FormatError(f"{where}.activation: expected one of {', '.join(ACTIVATIONS)}, got {act!r}")
        if w.shape[1] != width:
            raise FormatError(f"{where}.weights: expected {width} columns, got {w.shape[1]}")
        if b.size != w.shape[0]:
            raise FormatError(f"{where}.bias: expected {w.shape[0]} entries, got {b.size}")
        layers.append(DenseLayer(w, b, act))
        width = w.shape[0]
    beta = _number(obj.get("softplus_beta", 1.0), "softplus_beta")
    if beta <= 0:
        raise FormatError("softplus_beta: must be positive")
    return NetworkSpec(tuple(layers), input_dim, beta)


def load_network(path: PathLike) -> NetworkSpec:
    return _with_source(network_from_dict, path)


def save_network(network: NetworkSpec, path: PathLike) -> None:
    _write_json(network_to_dict(network), path)


# Queries ---------------------------------------------------------------------

def query_to_dict(query: VerificationQuery) -> dict:
    return {
        "center": query.center.tolist(),
        "epsilon": query.epsilon,
        "true_label": query.true_label,
        "target_label": query.target_label,
        "clamp": list(query.clamp) if query.clamp is not None else None,
    }


def query_from_dict(obj) -> VerificationQuery:
    center = _vector(_field(obj, "center", ""), "center")
    eps = _number(_field(obj, "epsilon", ""), "epsilon")
    if eps < 0:
        raise FormatError("epsilon: must be nonnegative")
    true_label = _integer(_field(obj, "true_label", ""), "true_label")
    target = obj.get("target_label")
    target = None if target is None else _integer(target, "target_label")
    if target is not None and target == true_label:
        raise FormatError("target_label: must differ from true_label")
    clamp = obj.get("clamp")
    if clamp is not None:
        if not isinstance(clamp, list) or len(clamp) != 2:
            raise FormatError("clamp: expected [lo, hi] or null")
        clamp = (_number(clamp[0], "clamp[0]"), _number(clamp[1], "clamp[1]"))
        if clamp[0] > clamp[1]:
            raise FormatError("clamp: lo exceeds hi")
    return VerificationQuery(center, eps, true_label, target, clamp)


def load_query(path: PathLike) -> VerificationQuery:
    return _with_source(query_from_dict, path)


def save_query(query: VerificationQuery, path: PathLike) -> None:
    _write_json(query_to_dict(query), path)


# Isotonic data ----------------------------------------------------------------

def isotonic_to_dict(spec: IsotonicSpec) -> dict:
    return {"y": spec.y.tolist(), "order": [list(p) for p in spec.order],
            "l": spec.l, "u": spec.u, "temperature": spec.temperature}


def isotonic_from_dict(obj) -> IsotonicSpec:
    y = _vector(_field(obj, "y", ""), "y")
    raw = _field(obj, "order", "")
    if not isinstance(raw, list):
        raise FormatError("order: expected a list of [j, i] pairs")
    order = []
    for k, pair in enumerate(raw):
        if not isinstance(pair, list) or len(pair) != 2:
            raise FormatError(f"order[{k}]: expected a pair [j, i]")
        order.append((_integer(pair[0], f"order[{k}][0]"), _integer(pair[1], f"order[{k}][1]")))
    lo = _number(_field(obj, "l", ""), "l")
    hi = _number(_field(obj, "u", ""), "u")
    temp = _number(obj.get("temperature", 1e-2), "temperature")
    try:
        return IsotonicSpec(y, tuple(order), lo, hi, temp)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def load_isotonic(path: PathLike) -> IsotonicSpec:
    return _with_source(isotonic_from_dict, path)


def save_isotonic(spec: IsotonicSpec, path: PathLike) -> None:
    _write_json(isotonic_to_dict(spec), path)


# Benchmark suites --------------------------------------------------------------

@dataclass(frozen=True)
class BenchSuite:
    """Recipe for a family of random networks and robustness queries."""

    count: int = 10
    input_dim: int = 4
    hidden: Tuple[int, ...] = (16, 16)
    classes: int = 3
    epsilon: float = 0.05
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if self.count < 1 or self.input_dim < 1 or self.classes < 2:
            raise ValueError("need count >= 1, input_dim >= 1 and classes >= 2")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("hidden must list positive layer widths")
        if self.activation not in ("relu", "softplus"):
            raise ValueError("activation must be relu or softplus")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def suite_to_dict(suite: BenchSuite) -> dict:
    return {"count": suite.count, "input_dim": suite.input_dim, "hidden": list(suite.hidden),
            "classes": suite.classes, "epsilon": suite.epsilon, "activation": suite.activation,
            "seed": suite.seed}


def suite_from_dict(obj) -> BenchSuite:
    if not isinstance(obj, dict):
        raise FormatError("document: expected an object")
    defaults = BenchSuite()
    hidden = obj.get("hidden", list(defaults.hidden))
    if not isinstance(hidden, list):
        raise FormatError("hidden: expected a list of integers")
    try:
        return BenchSuite(
            count=_integer(obj.get("count", defaults.count), "count"),
            input_dim=_integer(obj.get("input_dim", defaults.input_dim), "input_dim"),
            hidden=tuple(_integer(h, f"hidden[{i}]") for i, h in enumerate(hidden)),
            classes=_integer(obj.get("classes", defaults.classes), "classes"),
            epsilon=_number(obj.get("epsilon", defaults.epsilon), "epsilon"),
            activation=obj.get("activation", defaults.activation),
            seed=_integer(obj.get("seed", defaults.seed), "seed"),
        )
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(str(exc)) from exc


def load_suite(path: PathLike) -> BenchSuite:
    return _with_source(suite_from_dict, path)


def save_suite(suite: BenchSuite, path: PathLike) -> None:
    _write_json(suite_to_dict(suite), path)
