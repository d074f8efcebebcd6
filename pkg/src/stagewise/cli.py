"""Command-line front end.

Subcommands::

    stagewise verify NETWORK QUERY   certify a robustness query
    stagewise solve --instance SPEC  solve chain:N, parabola or isotonic:FILE
    stagewise bench SUITE            benchmark table over generated networks
    stagewise gen DIR                write example fixtures

Exit status is 0 when a verdict is produced (ROBUST, or every solve
converged), 2 when a solve hit the iteration limit without a verdict, 64 on
usage errors and 65 on malformed data files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import io
from .core import Iterate
from .instances import (IsotonicSpec, VerificationQuery, build_chain_problem, build_isotonic_problem,
                        build_parabola_problem, build_verification_problem, network_forward,
                        random_network)
from .optim import SolveConfig, SolveReport, TraceRecord, safe_psi_min, simple_psi_min

__all__ = ["main", "EXIT_OK", "EXIT_ITERATION_LIMIT", "EXIT_USAGE", "EXIT_DATA", "TRACE_HEADER"]

EXIT_OK = 0
EXIT_ITERATION_LIMIT = 2
EXIT_USAGE = 64
EXIT_DATA = 65

TRACE_HEADER = ["iter", "primal", "dual", "gap", "step", "wall_ms", "fixdeg"]

log = logging.getLogger("stagewise")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _configure_logging() -> None:
    level = os.environ.get("STAGEWISE_LOG", "off").strip().lower()
    levels = {"off": None, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"STAGEWISE_LOG must be one of off, info, debug (got {level!r})")
    root = logging.getLogger("stagewise")
    root.handlers.clear()
    if levels[level] is None:
        root.setLevel(logging.CRITICAL + 1)
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(levels[level])


class TraceWriter:
    """Append-only CSV trace, flushed after every row."""

    def __init__(self, path: Path):
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(TRACE_HEADER)
        self._fh.flush()

    def __call__(self, rec: TraceRecord) -> None:
        self._writer.writerow([rec.iter, repr(rec.primal), repr(rec.dual), repr(rec.gap),
                               repr(rec.step_size), f"{rec.wall_time * 1000.0:.3f}",
                               int(rec.fixdeg_invoked)])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--solver", choices=("simple", "safe"), default="safe")
    g.add_argument("--no-escape", action="store_true", help="same as --solver simple")
    g.add_argument("--epsilon-gap", type=float, default=SolveConfig.epsilon,
                   help="absolute gap tolerance (default %(default)g)")
    g.add_argument("--rel-gap", type=float, default=SolveConfig.relative_epsilon,
                   help="relative gap tolerance (default %(default)g)")
    g.add_argument("--max-iters", type=int, default=SolveConfig.max_iters)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-momentum", action="store_true", help="plain projected gradient steps")
    g.add_argument("--emit-trace", metavar="PATH", type=Path)
    g.add_argument("--emit-json", metavar="PATH", type=Path)


def _config(args) -> SolveConfig:
    try:
        return SolveConfig(max_iters=args.max_iters, epsilon=args.epsilon_gap,
                           relative_epsilon=args.rel_gap, use_momentum=not args.no_momentum,
                           seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _solver(args):
    return simple_psi_min if (args.solver == "simple" or args.no_escape) else safe_psi_min


def _run(problem, args, config, trace_path: Optional[Path], start=None) -> SolveReport:
    writer = TraceWriter(trace_path) if trace_path is not None else None
    try:
        return _solver(args)(problem, start=start, config=config, callback=writer)
    finally:
        if writer is not None:
            writer.close()


def _report_dict(report: SolveReport) -> dict:
    c = report.certificate
    return {"status": report.status.value, "primal": c.primal, "dual": c.dual, "gap": c.gap,
            "relative_gap": c.relative_gap, "iterations": report.iterations,
            "fixdeg_calls": report.fixdeg_calls,
            "s": report.best_iterate.s.tolist(), "theta": report.best_iterate.theta.tolist()}


def _trace_path_for(base: Optional[Path], target: int, multiple: bool) -> Optional[Path]:
    if base is None or not multiple:
        return base
    return base.with_name(f"{base.stem}.target{target}{base.suffix or '.csv'}")


# verify -----------------------------------------------------------------------

def cmd_verify(args) -> int:
    network = io.load_network(args.network)
    query = io.load_query(args.query)
    if query.center.size != network.input_dim:
        raise io.FormatError(f"center has {query.center.size} entries, network expects "
                             f"{network.input_dim}", str(args.query))
    if not 0 <= query.true_label < network.output_dim:
        raise io.FormatError("true_label: out of range for the network output", str(args.query))
    config = _config(args)
    if args.target is not None:
        targets = [args.target]
    elif query.target_label is not None:
        targets = [query.target_label]
    else:
        targets = [c for c in range(network.output_dim) if c != query.true_label]
    for t in targets:
        if not 0 <= t < network.output_dim or t == query.true_label:
            raise UsageError(f"invalid target class {t}")

    records = []
    for t in targets:
        problem = build_verification_problem(network, query, t)
        report = _run(problem, args, config, _trace_path_for(args.emit_trace, t, len(targets) > 1))
        rec = {"target": t, **_report_dict(report), "ibp_bound": problem.ibp_margin_bound(),
               "certified": report.certificate.dual > 0.0}
        records.append(rec)
        print(f"target {t}: dual={rec['dual']:.6g} primal={rec['primal']:.6g} gap={rec['gap']:.3g} "
              f"status={rec['status']} iters={rec['iterations']}")
    robust = all(r["certified"] for r in records)
    verdict = "ROBUST" if robust else "UNKNOWN"
    print(f"verdict: {verdict}")
    if args.emit_json is not None:
        doc = {"verdict": verdict, "true_label": query.true_label, "epsilon": query.epsilon,
               "records": records}
        args.emit_json.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if robust or all(r["status"] == "converged" for r in records):
        return EXIT_OK
    return EXIT_ITERATION_LIMIT


# solve ------------------------------------------------------------------------

def _parse_instance(spec: str):
    kind, _, arg = spec.partition(":")
    if kind == "chain":
        try:
            n = int(arg)
        except ValueError:
            raise UsageError("chain instance needs an integer size, e.g. chain:3") from None
        if n < 2:
            raise UsageError("chain size must be at least 2")
        return build_chain_problem(n)
    if kind == "parabola":
        if arg:
            raise UsageError("parabola takes no argument")
        return build_parabola_problem()
    if kind == "isotonic":
        if not arg:
            raise UsageError("isotonic instance needs a file, e.g. isotonic:data.json")
        spec_ = io.load_isotonic(arg)
        try:
            return build_isotonic_problem(spec_)
        except ValueError as exc:
            raise io.FormatError(str(exc), arg) from exc
    raise UsageError(f"unknown instance {spec!r} (expected chain:N, parabola or isotonic:FILE)")


def _parse_floats(text: str, name: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        raise UsageError(f"{name} must be a comma-separated list of numbers") from None


def _start(problem, args) -> Optional[Iterate]:
    if args.start_s is None and args.start_theta is None:
        return None
    base = problem.default_start()
    s = base.s if args.start_s is None else _parse_floats(args.start_s, "--start-s")
    theta = base.theta if args.start_theta is None else _parse_floats(args.start_theta, "--start-theta")
    if theta.size == 1:
        theta = np.full(problem.n, theta[0])
    if s.size != problem.m or theta.size != problem.n:
        raise UsageError(f"start point needs {problem.m} s-entries and {problem.n} theta-entries")
    if np.any(theta < 0) or np.any(theta > 1):
        raise UsageError("--start-theta entries must lie in [0, 1]")
    return Iterate(problem.project_s(s), theta)


def cmd_solve(args) -> int:
    problem = _parse_instance(args.instance)
    config = _config(args)
    report = _run(problem, args, config, args.emit_trace, _start(problem, args))
    c = report.certificate
    print(f"instance {args.instance}: primal={c.primal:.10g} dual={c.dual:.10g} gap={c.gap:.3g} "
          f"status={report.status.value} iters={report.iterations} fixdeg={report.fixdeg_calls}")
    if args.emit_json is not None:
        doc = {"instance": args.instance, **_report_dict(report)}
        args.emit_json.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK if report.converged else EXIT_ITERATION_LIMIT


# bench ------------------------------------------------------------------------

BENCH_COLUMNS = ["net", "hidden", "targets", "avg_bound", "avg_ibp_bound", "runtime_ms",
                 "early_stop_pct", "avg_iters"]


def bench_rows(suite: io.BenchSuite, config: SolveConfig, solver=safe_psi_min) -> List[dict]:
    """Solve every target of every generated network; one row per network."""
    rng = np.random.default_rng(suite.seed)
    rows = []
    for k in range(suite.count):
        net = random_network(rng, suite.input_dim, suite.hidden, suite.classes, suite.activation)
        center = rng.uniform(0.0, 1.0, suite.input_dim)
        logits, _ = network_forward(net, center)
        label = int(np.argmax(logits))
        query = VerificationQuery(center, suite.epsilon, label, clamp=(0.0, 1.0))
        bounds, ibps, iters, converged = [], [], [], 0
        t0 = time.perf_counter()
        for t in range(suite.classes):
            if t == label:
                continue
            problem = build_verification_problem(net, query, t)
            report = solver(problem, config=config)
            bounds.append(report.certificate.dual)
            ibps.append(problem.ibp_margin_bound())
            iters.append(report.iterations)
            converged += report.converged
        runtime = (time.perf_counter() - t0) * 1000.0
        rows.append({
            "net": k, "hidden": sum(suite.hidden), "targets": len(bounds),
            "avg_bound": float(np.mean(bounds)), "avg_ibp_bound": float(np.mean(ibps)),
            "runtime_ms": runtime, "early_stop_pct": 100.0 * converged / len(bounds),
            "avg_iters": float(np.mean(iters)),
        })
    return rows


def format_table(rows: Sequence[dict]) -> str:
    cells = [[_fmt(r[c]) for c in BENCH_COLUMNS] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(BENCH_COLUMNS)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(BENCH_COLUMNS, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_bench(args) -> int:
    suite = io.load_suite(args.suite)
    if args.seed is not None:
        suite = io.BenchSuite(**{**io.suite_to_dict(suite), "seed": args.seed,
                                 "hidden": tuple(suite.hidden)})
    config = _config(args)
    solver = _solver(args)
    rows = bench_rows(suite, config, solver)
    print(format_table(rows))
    if args.csv is not None:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
            w.writeheader()
            w.writerows(rows)
    if args.emit_json is not None:
        args.emit_json.write_text(json.dumps({"suite": io.suite_to_dict(suite), "rows": rows},
                                             indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


# gen --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    out = Path(args.directory)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    try:
        hidden = [int(h) for h in args.hidden.split(",")]
    except ValueError:
        raise UsageError("--hidden must be comma-separated integers") from None
    if any(h < 1 for h in hidden) or args.epsilon < 0:
        raise UsageError("hidden widths must be positive and epsilon nonnegative")
    net = random_network(rng, args.input_dim, hidden, args.classes, args.activation)
    center = rng.uniform(0.0, 1.0, args.input_dim)
    logits, _ = network_forward(net, center)
    query = VerificationQuery(center, args.epsilon, int(np.argmax(logits)), clamp=(0.0, 1.0))
    n = args.isotonic_n
    y = np.sort(rng.normal(size=n)) + rng.normal(scale=0.5, size=n)
    iso = IsotonicSpec.total_order(y, float(np.floor(y.min())), float(np.ceil(y.max())),
                                   temperature=1e-2)
    suite = io.BenchSuite(count=10, input_dim=args.input_dim, hidden=tuple(hidden),
                          classes=args.classes, epsilon=args.epsilon, activation=args.activation,
                          seed=args.seed)
    io.save_network(net, out / "network.json")
    io.save_query(query, out / "query.json")
    io.save_isotonic(iso, out / "isotonic.json")
    io.save_suite(suite, out / "suite.json")
    for name in ("network.json", "query.json", "isotonic.json", "suite.json"):
        print(out / name)
    return EXIT_OK


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stagewise", description="Stagewise convex solver with duality certificates.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("verify", help="certify a robustness query")
    p.add_argument("network", type=Path)
    p.add_argument("query", type=Path)
    p.add_argument("--target", type=int, metavar="CLASS", help="only this target class")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("solve", help="solve a built-in or file-based instance")
    p.add_argument("--instance", required=True, help="chain:N, parabola or isotonic:FILE")
    p.add_argument("--start-s", help="comma-separated starting s")
    p.add_argument("--start-theta", help="starting theta (one value or comma-separated)")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", help="benchmark table over a generated suite")
    p.add_argument("suite", type=Path)
    p.add_argument("--csv", type=Path, help="also write the table as CSV")
    _add_solver_flags(p)
    p.set_defaults(seed=None, func=cmd_bench)

    p = sub.add_parser("gen", help="write example fixtures into a directory")
    p.add_argument("directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-dim", type=_positive_int, default=4)
    p.add_argument("--hidden", default="8", help="comma-separated hidden widths")
    p.add_argument("--classes", type=_positive_int, default=3)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--activation", choices=("relu", "softplus"), default="relu")
    p.add_argument("--isotonic-n", type=_positive_int, default=12)
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        _configure_logging()
        return args.func(args)
    except UsageError as exc:
        print(f"stagewise: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except io.FormatError as exc:
        print(f"stagewise: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"stagewise: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
