"""Command line front end: config parsing, run/experiment orchestration and
report emission.

Commands
--------
run-sus        one subset simulation run, report JSON
run-bsus       one branching run, report JSON plus serialized tree
experiment     replicated campaign, per-run CSV plus aggregate JSON
dmc-reference  direct Monte Carlo reference probability, JSON
report         pretty-print a serialized tree

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime error.
Outputs are written atomically (temp file + rename) and are byte-identical
for identical configuration and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import asdict, fields

from .benchmarks import (
    ExperimentConfig,
    benchmark_by_name,
    dmc_estimate,
    execute_single_run,
    run_experiment,
)
from .bsus import tree_to_dict
from .model import ConfigurationError, RngStream

_CSV_COLUMNS = [
    "run_index",
    "seed",
    "estimate",
    "cov",
    "eval_count",
    "levels",
    "branches",
    "maxima_found",
    "zero_flag",
]


class _Parser(argparse.ArgumentParser):
    """Argparse parser that exits with code 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _atomic_write(path: str, data: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _write_json(path: str, obj):
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return int(value)
    return value


def load_config(path: str, overrides: dict) -> ExperimentConfig:
    """Experiment configuration from a JSON file plus CLI overrides.

    The file mirrors ``ExperimentConfig`` one key per field; unknown keys are
    rejected.  Overrides win over file values.
    """
    try:
        with open(path) as handle:
            raw = json.load(handle)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(
            f"unknown config keys: {', '.join(sorted(unknown))}; "
            f"known keys: {', '.join(sorted(known))}"
        )
    merged = dict(raw)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if "benchmark" not in merged or "algorithm" not in merged or "n" not in merged:
        raise ConfigurationError("config requires benchmark, algorithm and n")
    return ExperimentConfig(**merged)


def _config_overrides(args) -> dict:
    return {
        "base_seed": args.seed,
        "n": args.n,
        "p": args.p,
        "graph_budget": args.graph_budget,
        "replications": args.replications,
    }


def _add_common(parser: _Parser):
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="base seed override")
    parser.add_argument("--n", type=int, default=None, help="level size override")
    parser.add_argument("--p", type=float, default=None, help="level probability override")
    parser.add_argument(
        "--graph-budget", dest="graph_budget", type=int, default=None,
        help="graph budget override (branching runs)",
    )
    parser.add_argument(
        "--replications", type=int, default=None, help="replication count override"
    )
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument(
        "--workers",
        type=int,
        default=os.cpu_count() or 1,
        help="worker processes for replications",
    )


def _run_report(config: ExperimentConfig, record, extras: dict) -> dict:
    report = {
        "config": asdict(config),
        "seed": record.seed,
        "estimate": record.estimate,
        "cov": record.cov,
        "zero_flag": record.zero_flag,
        "eval_count": record.eval_count,
        "levels": record.levels,
        "branches": record.branches,
        "maxima_found": record.maxima_found,
        "design_flag": record.design_flag,
    }
    report.update(extras)
    return report


def _cmd_run(args, algorithm: str) -> int:
    overrides = _config_overrides(args)
    config = load_config(args.config, overrides)
    if config.algorithm != algorithm:
        config = ExperimentConfig(**{**asdict(config), "algorithm": algorithm})
    seed = config.base_seed
    record, result = execute_single_run(config, run_index=0, seed=seed)
    if algorithm == "sus":
        extras = {
            "thresholds": list(result.thresholds),
            "stop_reason": result.stop_reason,
        }
    else:
        tree_path = os.path.join(args.out, "tree.json")
        _write_json(tree_path, tree_to_dict(result))
        print(f"wrote {tree_path}")
        extras = {"tree_file": "tree.json"}
    run_path = os.path.join(args.out, "run.json")
    _write_json(run_path, _run_report(config, record, extras))
    print(f"wrote {run_path}")
    return 0


def _cmd_experiment(args) -> int:
    config = load_config(args.config, _config_overrides(args))
    report = run_experiment(config, workers=max(1, args.workers))
    rows = []
    for r in report.records:
        rows.append([_cell(getattr(r, column)) for column in _CSV_COLUMNS])
    buffer = []
    buffer.append(",".join(_CSV_COLUMNS))
    for row in rows:
        buffer.append(",".join(str(v) for v in row))
    csv_path = os.path.join(args.out, "runs.csv")
    _atomic_write(csv_path, "\n".join(buffer) + "\n")
    aggregate_path = os.path.join(args.out, "aggregate.json")
    _write_json(
        aggregate_path,
        {"config": asdict(config), "aggregates": report.aggregates()},
    )
    print(f"wrote {csv_path}")
    print(f"wrote {aggregate_path}")
    return 0


def _cmd_dmc(args) -> int:
    bench = benchmark_by_name(args.benchmark)
    threshold = args.threshold
    if threshold is None:
        if bench.failure_threshold is None:
            raise ConfigurationError(
                f"benchmark {bench.name} has no failure threshold; pass --threshold"
            )
        threshold = bench.failure_threshold
    result = dmc_estimate(
        bench.fn, bench.base_dim, threshold, args.samples, RngStream(args.seed)
    )
    payload = {
        "benchmark": bench.name,
        "threshold": threshold,
        "samples": result.count,
        "seed": args.seed,
        "estimate": result.estimate,
        "cov": result.cov,
        "zero_flag": result.zero,
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out is not None:
        path = os.path.join(args.out, "dmc.json")
        _write_json(path, payload)
        print(f"wrote {path}")
    return 0


def _cmd_report(args) -> int:
    with open(args.tree) as handle:
        data = json.load(handle)
    nodes = data.get("nodes", [])
    print(f"tree: {len(nodes)} nodes, n={data.get('n')}, p={data.get('p')}, "
          f"dim={data.get('dim')}, evals={data.get('eval_count')}")
    print("id parent threshold samples chains stopped reason")
    for node in nodes:
        threshold = node["threshold"]
        threshold = "-inf" if threshold is None else f"{threshold:.6g}"
        parent = node["parent"] if node["parent"] is not None else "-"
        reason = node["stop_reason"] or "-"
        print(
            f"{node['id']} {parent} {threshold} {len(node['points'])} "
            f"{node['chain_count'] if node['chain_count'] is not None else '-'} "
            f"{int(node['stopped'])} {reason}"
        )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="subsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run_sus = sub.add_parser("run-sus", help="single subset simulation run")
    _add_common(run_sus)
    run_bsus = sub.add_parser("run-bsus", help="single branching run")
    _add_common(run_bsus)
    experiment = sub.add_parser("experiment", help="replicated experiment")
    _add_common(experiment)

    dmc = sub.add_parser("dmc-reference", help="direct Monte Carlo reference")
    dmc.add_argument("--benchmark", required=True)
    dmc.add_argument("--threshold", type=float, default=None)
    dmc.add_argument("--samples", type=int, default=1_000_000)
    dmc.add_argument("--seed", type=int, default=0)
    dmc.add_argument("--out", default=None, help="optional output directory")

    report = sub.add_parser("report", help="pretty-print a serialized tree")
    report.add_argument("tree", help="tree.json produced by run-bsus")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run-sus":
            return _cmd_run(args, "sus")
        if args.command == "run-bsus":
            return _cmd_run(args, "bsus")
        if args.command == "experiment":
            return _cmd_experiment(args)
        if args.command == "dmc-reference":
            return _cmd_dmc(args)
        if args.command == "report":
            return _cmd_report(args)
        parser.error(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        sys.stderr.write(f"validation error: {exc}\n")
        return 2
    except Exception as exc:  # runtime failures map to a dedicated code
        sys.stderr.write(f"runtime error: {type(exc).__name__}: {exc}\n")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
