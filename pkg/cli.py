#!/usr/bin/env python3
"""
cli.py — Command-line entry point.

Subcommands:
    mesh         build (or find cached) icosphere levels
    simulate     two-grid synthetic data for a scenario: y.csv, y_d<tag>.csv, measurement.json
    reconstruct  bootstrap + Landweber on one measurement file: run.json, iterates/, error_report.csv
    evaluate     aggregate error reports of finished runs into error_table.csv
    ladder       simulate + one reconstruction per (seed, noise level), run concurrently, + evaluate

Exit codes: 0 success (including stalled runs), 1 usage/config, 2 IO, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from dotenv import find_dotenv, load_dotenv

from error_utils import EXIT_OK, ConfigurationError
from fp_constants import COARSE_LEVEL, SCHEMA, parse_overrides, validate_value
from harness import PRESETS, Scenario, load_scenario
from log_utils import log_error, reset_loggers, verbose_log
from pipeline import RULE_ORDER, FokkerIdPipeline, PipelineStage, classify_error


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as configuration errors (exit 1)."""

    def error(self, message: str):
        raise ConfigurationError("arguments", " ".join(sys.argv[1:]), message)


@dataclass
class RunConfig:
    subcommand: str
    scenario: Path | None
    overrides: dict = field(default_factory=dict)
    output_dir: Path | None = None
    seed: int | None = None
    verbose: bool = False


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a schema default (repeatable); see --list-keys")
    parser.add_argument("--verbose", action="store_true", help="Log progress to console and logs/run_NNN.log")
    parser.add_argument("--cache-dir", type=Path, default=None, help="Mesh cache directory")
    parser.add_argument("--list-keys", action="store_true", help="List overridable keys and exit")


def _add_scenario(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--scenario", type=Path, help="Scenario JSON file")
    group.add_argument("--preset", choices=sorted(PRESETS), help="Built-in scenario")
    parser.add_argument("--seed", type=int, default=None, help="Noise seed (overrides the scenario)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fokkerid", description="Drift identification for the Néel Fokker-Planck equation")
    commands = parser.add_subparsers(dest="command", required=True)

    mesh = commands.add_parser("mesh", help="Build and cache icosphere meshes")
    mesh.add_argument("--level", type=int, nargs="+", default=[COARSE_LEVEL])
    _add_common(mesh)

    simulate = commands.add_parser("simulate", help="Generate synthetic measurements")
    _add_scenario(simulate)
    simulate.add_argument("--out", type=Path, default=None, help="Output directory (default runs/<scenario>)")
    simulate.add_argument("--dump-state", action="store_true", help="Also write the coarse state as state.csv")
    _add_common(simulate)

    reconstruct = commands.add_parser("reconstruct", help="Reconstruct from one measurement file")
    reconstruct.add_argument("--measurement", type=Path, required=False)
    _add_scenario(reconstruct)
    reconstruct.add_argument("--out", type=Path, default=None, help="Output directory (default <measurement dir>/run_<name>)")
    reconstruct.add_argument("--delta", type=float, default=None, help="Noise bound for the discrepancy principle")
    _add_common(reconstruct)

    evaluate = commands.add_parser("evaluate", help="Aggregate error reports into a table")
    evaluate.add_argument("runs", type=Path, nargs="*", help="Run directories, or a root searched for run.json")
    evaluate.add_argument("--out", type=Path, default=None, help="Table path (default <first run>/../error_table.csv)")
    evaluate.add_argument("--rule", action="append", choices=RULE_ORDER, default=None,
                          help="Stopping rules to include (repeatable; default all)")
    _add_common(evaluate)

    ladder = commands.add_parser("ladder", help="Noise ladder: simulate, reconstruct every level, evaluate")
    _add_scenario(ladder)
    ladder.add_argument("--out", type=Path, default=None, help="Output directory (default runs/<scenario>_ladder)")
    ladder.add_argument("--seeds", type=int, nargs="+", default=None, help="Seeds (default: the scenario seed)")
    ladder.add_argument("--workers", type=int, default=1, help="Concurrent reconstructions")
    _add_common(ladder)
    return parser


def _print_keys() -> None:
    print(f"{'key':<20} {'default':<24} description")
    for key, entry in SCHEMA.items():
        default = "auto" if entry.default is None else entry.default
        print(f"{key:<20} {str(default):<24} {entry.description}")


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides = parse_overrides(args.set)
    seed = getattr(args, "seed", None)
    if seed is not None:
        overrides["seed"] = validate_value("seed", seed)
    return RunConfig(
        subcommand=args.command,
        scenario=getattr(args, "scenario", None),
        overrides=overrides,
        output_dir=getattr(args, "out", None),
        seed=seed,
        verbose=args.verbose,
    )


def _load_scenario(args: argparse.Namespace, fallback: Path | None = None) -> Scenario:
    if getattr(args, "preset", None):
        return PRESETS[args.preset]()
    path = args.scenario or fallback
    if path is None:
        raise ConfigurationError("scenario", None, "pass --scenario FILE or --preset NAME")
    return load_scenario(path)


def _find_runs(paths: list[Path]) -> list[Path]:
    runs: list[Path] = []
    for path in paths:
        if (path / "run.json").exists():
            runs.append(path)
        else:
            found = sorted(p.parent for p in path.rglob("run.json"))
            runs.extend(found if found else [path])
    return runs


# =============================================================================
# SUBCOMMANDS
# =============================================================================

def cmd_mesh(args: argparse.Namespace, pipeline: FokkerIdPipeline) -> int:
    for level in args.level:
        mesh, hit, path = pipeline.build_mesh(level)
        print(f"Level {level}: {len(mesh.triangles)} triangles "
              f"({'cache hit' if hit else 'built'}) -> {path}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, pipeline: FokkerIdPipeline) -> int:
    scenario = _load_scenario(args)
    out = args.out or Path("runs") / scenario.name
    result = pipeline.simulate(scenario, out, dump_state=args.dump_state)
    print(f"Simulated {result.scenario.name} (case {int(result.scenario.case)}) -> {out}")
    print(f"  model mismatch: {result.model_mismatch:.6e}")
    for level, delta in result.measurement.deltas.items():
        print(f"  noise {level:>6.2%}: delta = {delta:.6e}")
    return EXIT_OK


def cmd_reconstruct(args: argparse.Namespace, pipeline: FokkerIdPipeline) -> int:
    if args.measurement is None:
        raise ConfigurationError("measurement", None, "pass --measurement FILE")
    scenario = _load_scenario(args, fallback=args.measurement.parent / "scenario.json")
    out = args.out or args.measurement.parent / f"run_{args.measurement.stem}"
    result = pipeline.reconstruct(scenario, args.measurement, out, delta=args.delta)
    run = result.run
    print(f"Reconstruction {run.status}: {run.last_index} iterations -> {out}")
    if result.bootstrap is not None:
        print(f"  initial-value search: {result.bootstrap.last_index} iterations ({result.bootstrap.status})")
    print(f"  discrepancy {run.discrepancies[0]:.6e} -> {run.discrepancies[-1]:.6e}")
    print(f"  discrepancy-principle iterate: {run.discrepancy_index}, best iterate: {run.best_index}")
    if result.report is not None:
        for row in result.report.rows:
            print(f"  {row.rule:<12} k={row.iteration:<4} L2 {row.l2:.4f}  H1 {row.h1:.4f}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, pipeline: FokkerIdPipeline) -> int:
    if not args.runs:
        raise ConfigurationError("runs", None, "pass at least one run directory")
    runs = _find_runs(args.runs)
    out = args.out or args.runs[0] / "error_table.csv"
    rules = tuple(args.rule) if args.rule else RULE_ORDER
    result = pipeline.evaluate(runs, out, rules=rules)
    print(f"Error table: {result.rows} rows -> {result.table}")
    for skipped in result.skipped:
        print(f"  ⚠ skipped incomplete run {skipped}")
    return EXIT_OK


def cmd_ladder(args: argparse.Namespace, pipeline: FokkerIdPipeline) -> int:
    scenario = _load_scenario(args)
    if args.workers < 1:
        raise ConfigurationError("workers", args.workers, "must be at least 1")
    out = args.out or Path("runs") / f"{scenario.name}_ladder"
    result = pipeline.ladder(scenario, out, seeds=args.seeds, workers=args.workers)
    print(f"Ladder: {len(result.runs)} runs, {len(result.failed)} failed -> {result.evaluation.table}")
    for label, reason in sorted(result.failed.items()):
        print(f"  ✗ {label}: {reason}")
    return EXIT_OK


COMMANDS = {
    "mesh": (cmd_mesh, PipelineStage.MESH),
    "simulate": (cmd_simulate, PipelineStage.SIMULATE),
    "reconstruct": (cmd_reconstruct, PipelineStage.RECONSTRUCT),
    "evaluate": (cmd_evaluate, PipelineStage.EVALUATE),
    "ladder": (cmd_ladder, PipelineStage.LADDER),
}


def main(argv: list[str] | None = None) -> int:
    load_dotenv(find_dotenv(usecwd=True))
    stage = PipelineStage.SIMULATE
    try:
        args = build_parser().parse_args(argv)
        handler, stage = COMMANDS[args.command]
        if args.list_keys:
            _print_keys()
            return EXIT_OK
        if args.verbose:
            os.environ["FOKKERID_VERBOSE"] = "1"
            reset_loggers()
        # overrides are validated before anything is computed or written
        config = _run_config(args)
        verbose_log(f"{config.subcommand}: overrides {config.overrides}")
        pipeline = FokkerIdPipeline(config.overrides, cache_dir=args.cache_dir)
        return handler(args, pipeline)
    except Exception as exc:
        classification = classify_error(exc, stage)
        log_error(classification.user_message)
        print(f"Error: {classification.user_message}", file=sys.stderr)
        if classification.hint:
            print(f"Hint: {classification.hint}", file=sys.stderr)
        return classification.exit_code


if __name__ == "__main__":
    sys.exit(main())
