"""Command-line front end for the experiment pipeline.

Exit codes: 0 on success, 1 on contract/format/usage errors (including a
missing artifact, which the message names), 2 when the strategy search
overruns its candidate budget.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from ..errors import BudgetError, ContractError, FormatError
from . import experiment
from .config import ExperimentConfig, load_config, seed_overrides

_MODE_STAGE = {
    "ours": "train_substitute",
    "baseline": "train_baseline",
    "no-strategy-loss": "train_baseline",
    "search": "search_searched",
    "traditional": "search_traditional",
}


def _add_common(sub: argparse.ArgumentParser, *, config_required: bool = True) -> None:
    sub.add_argument(
        "--config",
        required=config_required,
        help="experiment config file (flat key = value lines)",
    )
    sub.add_argument("--out", default="run", help="run directory (default: ./run)")
    sub.add_argument(
        "--seed",
        type=int,
        default=None,
        help="master seed N; sets the five stream seeds to N..N+4",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exitsteal",
        description="multi-exit extraction experiments: victim, attack, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("train-victim", "generate the dataset (if needed) and train the victim"),
        ("deploy", "pick the victim's thresholds and timing model"),
        ("query", "send calibration and attack queries to the victim"),
        ("estimate-exits", "segment runtimes and label queries with exits"),
        ("evaluate", "score every variant on the test set"),
        ("run-experiment", "run every stage in order, resuming where possible"),
    ):
        _add_common(sub.add_parser(name, help=help_text))

    train_sub = sub.add_parser("train-substitute", help="train a substitute network")
    _add_common(train_sub)
    train_sub.add_argument(
        "--mode",
        choices=("ours", "baseline", "no-strategy-loss"),
        default="ours",
        help="which training objective/architecture to use",
    )

    search_sub = sub.add_parser("search-strategy", help="choose output thresholds")
    _add_common(search_sub)
    search_sub.add_argument(
        "--mode",
        choices=("search", "traditional"),
        default="search",
        help="exact per-exit search or the conventional uniform-threshold scan",
    )

    report_sub = sub.add_parser("report", help="print the evaluation table for a run")
    _add_common(report_sub, config_required=False)
    return parser


def _config_from_args(args) -> ExperimentConfig:
    overrides = seed_overrides(args.seed) if args.seed is not None else None
    return load_config(args.config, overrides)


def _print_stage(name: str, ran: bool) -> None:
    print(f"{name}: {'done' if ran else 'skipped (outputs exist)'}")


def _report_rows(run_dir) -> list[tuple[str, dict]]:
    rows = []
    for name in experiment.VARIANTS:
        path = os.path.join(run_dir, f"report_{name}.json")
        if os.path.exists(path):
            with open(path) as fh:
                rows.append((name, json.load(fh)))
    return rows


def _print_report(run_dir) -> None:
    rows = _report_rows(run_dir)
    if not rows:
        raise ContractError(
            f"no report_*.json under {run_dir}; run 'exitsteal evaluate' first"
        )
    header = f"{'model':<18}{'acc':>8}{'clo':>8}{'cc_gflops':>12}{'cc_ratio':>10}"
    print(header)
    print("-" * len(header))
    for name, rep in rows:
        print(
            f"{name:<18}{rep['acc']:>8.4f}{rep['clo']:>8.4f}"
            f"{rep['cc_gflops']:>12.4f}{rep['cc_ratio']:>10.4f}"
        )


def _dispatch(args) -> int:
    if args.command == "report":
        _print_report(args.out)
        return 0

    cfg = _config_from_args(args)
    if args.command == "run-experiment":
        experiment.run_experiment(cfg, args.out)
        _print_report(args.out)
        return 0
    if args.command == "train-victim":
        _print_stage("dataset", experiment.run_stage("dataset", cfg, args.out))
        _print_stage("train_victim", experiment.run_stage("train_victim", cfg, args.out))
        return 0
    stage = {
        "deploy": "deploy",
        "query": "query",
        "estimate-exits": "estimate_exits",
        "evaluate": "evaluate",
    }.get(args.command) or _MODE_STAGE[args.mode]
    _print_stage(stage, experiment.run_stage(stage, cfg, args.out))
    if args.command == "evaluate":
        _print_report(args.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help (0) and usage errors (2)
        return 0 if exc.code == 0 else 1
    try:
        return _dispatch(args)
    except BudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
