"""Command-line entry point: run scenarios, sweep faults, re-check traces."""

import argparse
import logging
import sys
from pathlib import Path
from typing import NoReturn, Optional, Sequence

from errors import SchemaError, StepBudgetExceeded
from harness import (
    EXIT_OK,
    EXIT_STEP_BUDGET,
    EXIT_USAGE,
    EXIT_VIOLATION,
    SweepSpec,
    run_scenario,
    sweep_exit_code,
    sweep_faults,
)
from models.outcome import Violation
from models.scenario import Scenario
from models.trace import Trace
from predicates import check_predicates
from settings import Settings

logger = logging.getLogger("keyfort")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="keyfort", description="Deterministic TEE update/migration simulator.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeat for debug)")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = commands.add_parser("run", help="run one scenario and check every predicate")
    run.add_argument("scenario", type=Path)
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--trace", type=Path, default=None, help="write the trace as JSONL")

    sweep = commands.add_parser("sweep", help="inject every single fault into an update or migration")
    sweep.add_argument("scenario", type=Path)
    sweep.add_argument("--spec", type=SweepSpec, choices=list(SweepSpec), default=SweepSpec.ALL)
    sweep.add_argument("--jobs", type=int, default=1)
    sweep.add_argument("--report", type=Path, default=None, help="write the sweep report as JSON")

    predicates = commands.add_parser("predicates", help="re-check a recorded trace")
    predicates.add_argument("trace", type=Path)
    return parser


def _configure_logging(settings: Settings, verbose: int) -> None:
    level = settings.level
    if verbose == 1:
        level = min(level, logging.INFO)
    elif verbose > 1:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _print_violations(violations: list[Violation]) -> None:
    for violation in violations:
        print(f"  [{violation.predicate}] event {violation.index}: {violation.message}")


def _run(args: argparse.Namespace, settings: Settings) -> int:
    result = run_scenario(args.scenario, seed=args.seed, trace_path=args.trace, settings=settings)
    if result.outcome is not None:
        print(f"outcome: {result.outcome.kind.value}")
        if result.outcome.detail:
            print(f"detail: {result.outcome.detail}")
        for name, version in result.outcome.final_versions.items():
            print(f"  {name} v_latest={version}")
    print(f"trace: {len(result.trace)} events, sha256 {result.trace.digest()}")
    print(f"violations: {len(result.violations)}")
    _print_violations(result.violations)
    return result.exit_code


def _sweep(args: argparse.Namespace, settings: Settings) -> int:
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    scenario = Scenario.load(args.scenario)
    report = sweep_faults(args.scenario, args.spec, jobs=args.jobs, settings=settings, scenario=scenario)
    if args.report is not None:
        args.report.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    print(f"cases: {report.arithmetic}")
    for outcome, count in report.outcome_counts.items():
        print(f"  {outcome}: {count}")
    print(f"violations: {len(report.violations)}")
    _print_violations(report.violations)
    print(f"digest: {report.digest} ({report.wall_time_s:.2f}s)")
    return sweep_exit_code(report, scenario)


def _predicates(args: argparse.Namespace) -> int:
    violations = check_predicates(Trace.load(args.trace))
    print(f"violations: {len(violations)}")
    _print_violations(violations)
    return EXIT_VIOLATION if violations else EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        settings = Settings.from_env()
    except (UsageError, ValueError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    _configure_logging(settings, args.verbose)

    try:
        if args.command == "run":
            return _run(args, settings)
        if args.command == "sweep":
            return _sweep(args, settings)
        return _predicates(args)
    except (SchemaError, UsageError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except StepBudgetExceeded as exc:
        logger.error("%s", exc)
        return EXIT_STEP_BUDGET


if __name__ == "__main__":
    sys.exit(main())
