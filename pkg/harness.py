"""Scenario execution and exhaustive single-fault sweeps."""

import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import attacks
from errors import AmbiguousTerminalState, ScenarioError, StepBudgetExceeded
from models.envelope import CrashPoint, CrashStage, FaultAction, FaultPlan, FaultRule, MessageKind, StoreFaultPoint
from models.outcome import (
    LEGAL_PROTOCOL_OUTCOMES,
    OperationOutcome,
    OutcomeKind,
    SweepCase,
    SweepReport,
    Violation,
)
from models.scenario import OperationKind, Scenario
from models.trace import Trace
from orchestrator import run_migration, run_update
from predicates import ATOMICITY, check_predicates
from settings import Settings
from world import World

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATION = 2
EXIT_USAGE = 3
EXIT_STEP_BUDGET = 4
EXIT_EXPECTED_VIOLATION = 5

OUTCOME_LEGALITY = "outcome-legality"
TERMINATION = "termination"

# message kinds whose loss may legitimately end with neither enclave running
_ALARM_KINDS = frozenset({MessageKind.OK_4O, MessageKind.OK_4Q})


class SweepSpec(str, Enum):
    SINGLE_FAULTS = "single-faults"
    CRASHES = "crashes"
    STORE_FAULTS = "store-faults"
    BOTH = "both"
    ALL = "all"

    @property
    def messages(self) -> bool:
        return self in (SweepSpec.SINGLE_FAULTS, SweepSpec.BOTH, SweepSpec.ALL)

    @property
    def crashes(self) -> bool:
        return self in (SweepSpec.CRASHES, SweepSpec.BOTH, SweepSpec.ALL)

    @property
    def store_faults(self) -> bool:
        return self in (SweepSpec.STORE_FAULTS, SweepSpec.ALL)


@dataclass
class RunResult:
    scenario: Scenario
    trace: Trace
    outcome: Optional[OperationOutcome] = None
    violations: list[Violation] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        if self.scenario.expect_violation:
            return EXIT_EXPECTED_VIOLATION if self.violations else EXIT_VIOLATION
        return EXIT_VIOLATION if self.violations else EXIT_OK


def _run_protocol(world: World) -> OperationOutcome:
    operation = world.scenario.operation
    target = operation.target.encode()
    if operation.kind == OperationKind.UPDATE:
        return run_update(world, operation.source, target, operation.version, operation.binary.encode())
    install = world.scenario.target_install()
    return run_migration(
        world,
        operation.source,
        operation.destination,
        target,
        operation.version if operation.version is not None else install.version,
        (operation.binary or install.binary).encode(),
    )


RUNNERS: dict[OperationKind, Callable[[World], OperationOutcome]] = {
    OperationKind.UPDATE: _run_protocol,
    OperationKind.MIGRATION: _run_protocol,
    OperationKind.CLONE_ATTACK: attacks.clone_attack,
    OperationKind.ROLLBACK_ATTACK: attacks.rollback_attack,
    OperationKind.STATE_REPLAY_ATTACK: attacks.state_replay_attack,
    OperationKind.TIME_ACCOUNTING: attacks.time_accounting,
}


def execute(
    scenario: Scenario,
    settings: Optional[Settings] = None,
    store_dir: Optional[str | Path] = None,
) -> RunResult:
    """Install the scenario, run its operation to quiescence and check every predicate.

    Raises:
        ScenarioError: If the installs are inconsistent with the SM rules.
        StepBudgetExceeded: If the run does not settle.
    """
    world = World(scenario, settings=settings, store_dir=store_dir)
    try:
        world.install()
        world.schedule_inputs(scenario.operation.target.encode(), scenario.operation.inputs_during)
        try:
            outcome = RUNNERS[scenario.operation.kind](world)
        except AmbiguousTerminalState as exc:
            violations = check_predicates(world.trace, world)
            violations.append(Violation(predicate=ATOMICITY, index=max(len(world.trace) - 1, 0), message=str(exc)))
            return RunResult(scenario=scenario, trace=world.trace, violations=violations)
        violations = check_predicates(world.trace, world)
    finally:
        world.close()
    logger.info(
        "scenario finished",
        extra={"outcome": outcome.kind.value, "events": len(world.trace), "violations": len(violations)},
    )
    return RunResult(scenario=scenario, trace=world.trace, outcome=outcome, violations=violations)


def run_scenario(
    path: str | Path,
    seed: Optional[int] = None,
    trace_path: Optional[str | Path] = None,
    settings: Optional[Settings] = None,
) -> RunResult:
    scenario = Scenario.load(path)
    if seed is not None:
        scenario = scenario.model_copy(update={"seed": seed})
    result = execute(scenario, settings=settings)
    if trace_path is not None:
        result.trace.write(trace_path)
    return result


# -- sweeps ----------------------------------------------------------------


@dataclass(frozen=True)
class FaultCase:
    """One sweep case: the fault plan to inject and whether an alarm is an acceptable end."""

    plan: FaultPlan
    alarm_allowed: bool


def _sent_messages(trace: Trace) -> list[tuple[MessageKind, int]]:
    seen: list[tuple[MessageKind, int]] = []
    for event in trace:
        if event.detail.get("io") != "send":
            continue
        key = (MessageKind(event.kind), int(event.detail["occurrence"]))
        if key not in seen:
            seen.append(key)
    return seen


def _dispatches(trace: Trace) -> list[tuple[str, int, MessageKind]]:
    seen: list[tuple[str, int, MessageKind]] = []
    for event in trace:
        if event.detail.get("io") != "deliver" or "index" not in event.detail:
            continue
        key = (event.detail["component"], int(event.detail["index"]), MessageKind(event.kind))
        if key not in seen:
            seen.append(key)
    return seen


def _stages(trace: Trace) -> list[tuple[str, CrashStage]]:
    seen: list[tuple[str, CrashStage]] = []
    for event in trace.of_kind("Stage"):
        key = (event.src, CrashStage(event.verdict))
        if key not in seen:
            seen.append(key)
    return seen


def _store_writes(trace: Trace) -> list[tuple[str, int]]:
    return [
        (event.src, index)
        for event in trace.of_kind("StoreWrites")
        for index in range(int(event.detail["first"]), int(event.detail["end"]))
    ]


def _commit_window_crash(scenario: Scenario, component: str, stage: CrashStage, kind: MessageKind) -> bool:
    """Destination-SM crashes between sending 4n and receiving 4o lose 4o like a dropped message."""
    operation = scenario.operation
    if operation.kind != OperationKind.MIGRATION or component != operation.destination:
        return False
    if component == operation.source:
        return False
    return (kind, stage) in (
        (MessageKind.COMMIT, CrashStage.AFTER),
        (MessageKind.OK_4O, CrashStage.BEFORE),
    )


def enumerate_cases(
    scenario: Scenario, baseline: Trace, spec: SweepSpec
) -> tuple[list[FaultCase], str, int, int, int]:
    """Every single-fault placement derived from the fault-free trace.

    Returns the cases, the arithmetic behind their count, and the message,
    crash and store-fault case counts.
    """
    cases: list[FaultCase] = []
    messages = _sent_messages(baseline) if spec.messages else []
    for kind, occurrence in messages:
        for action in FaultAction:
            rule = FaultRule(kind=kind, occurrence=occurrence, action=action)
            cases.append(FaultCase(FaultPlan(rules=[rule]), alarm_allowed=kind in _ALARM_KINDS))
    message_cases = len(cases)

    dispatches = _dispatches(baseline) if spec.crashes else []
    stages = _stages(baseline) if spec.crashes else []
    for component, index, kind in dispatches:
        for stage in (CrashStage.BEFORE, CrashStage.AFTER):
            point = CrashPoint(component=component, stage=stage, dispatch_index=index)
            allowed = _commit_window_crash(scenario, component, stage, kind)
            cases.append(FaultCase(FaultPlan(crashes=[point]), alarm_allowed=allowed))
    for component, stage in stages:
        cases.append(FaultCase(FaultPlan(crashes=[CrashPoint(component=component, stage=stage)]), alarm_allowed=False))
    crash_cases = len(cases) - message_cases

    writes = _store_writes(baseline) if spec.store_faults else []
    for component, index in writes:
        point = StoreFaultPoint(component=component, write_index=index)
        cases.append(FaultCase(FaultPlan(store_faults=[point]), alarm_allowed=False))
    store_fault_cases = len(writes)

    total = message_cases + crash_cases + store_fault_cases
    arithmetic = (
        f"{len(messages)} messages x {len(FaultAction)} actions = {message_cases}; "
        f"{len(dispatches)} dispatches x 2 + {len(stages)} commit stages = {crash_cases}; "
        f"{store_fault_cases} store writes; "
        f"total {total}"
    )
    return cases, arithmetic, message_cases, crash_cases, store_fault_cases


def merge_plans(base: FaultPlan, extra: FaultPlan) -> FaultPlan:
    """The scenario's own faults with one sweep case layered on top."""
    return FaultPlan(
        rules=[*base.rules, *extra.rules],
        crashes=[*base.crashes, *extra.crashes],
        store_faults=[*base.store_faults, *extra.store_faults],
        adversary_replay=base.adversary_replay or extra.adversary_replay,
    )


def run_case(scenario: Scenario, settings: Optional[Settings], index: int, case: FaultCase) -> SweepCase:
    """Run one fault placement; safe to call in a worker process."""
    faulted = scenario.model_copy(update={"faults": merge_plans(scenario.faults, case.plan)})
    description = case.plan.describe()
    try:
        result = execute(faulted, settings=settings)
    except StepBudgetExceeded as exc:
        violation = Violation(predicate=TERMINATION, index=0, message=str(exc))
        return SweepCase(index=index, fault=description, violations=[violation], error=exc.code)
    violations = list(result.violations)
    outcome = result.outcome.kind if result.outcome is not None else None
    if outcome is not None and outcome not in LEGAL_PROTOCOL_OUTCOMES:
        violations.append(
            Violation(predicate=OUTCOME_LEGALITY, index=len(result.trace) - 1, message=f"{outcome.value} is not a protocol outcome")
        )
    if outcome == OutcomeKind.ALARM_NEITHER_ACTIVE and not case.alarm_allowed:
        violations.append(
            Violation(predicate=OUTCOME_LEGALITY, index=len(result.trace) - 1, message=f"alarm raised under '{description}'")
        )
    return SweepCase(index=index, fault=description, outcome=outcome, violations=violations)


def _run_case_args(args: tuple[Scenario, Optional[Settings], int, FaultCase]) -> SweepCase:
    return run_case(*args)


def report_digest(cases: list[SweepCase]) -> str:
    hasher = hashlib.sha256()
    for case in cases:
        hasher.update(case.model_dump_json().encode("utf-8"))
        hasher.update(b"\n")
    return hasher.hexdigest()


def sweep_faults(
    path: str | Path,
    spec: SweepSpec = SweepSpec.ALL,
    jobs: int = 1,
    settings: Optional[Settings] = None,
    scenario: Optional[Scenario] = None,
) -> SweepReport:
    """Run the fault-free baseline, then every single fault derived from it.

    Raises:
        ScenarioError: If the scenario's operation is not an update or a migration.
        StepBudgetExceeded: If the fault-free baseline does not settle.
    """
    started = time.perf_counter()
    scenario = scenario or Scenario.load(path)
    if not scenario.operation.kind.protocol:
        raise ScenarioError(f"sweeps need an update or a migration, not {scenario.operation.kind.value}")
    # the baseline keeps the adversary's replay and any planned store faults, but no message or crash faults
    base = scenario.faults.model_copy(update={"rules": [], "crashes": []})
    baseline = execute(scenario.model_copy(update={"faults": base}), settings=settings)
    cases, arithmetic, message_cases, crash_cases, store_fault_cases = enumerate_cases(scenario, baseline.trace, spec)
    logger.info("sweep started", extra={"cases": len(cases), "jobs": jobs})

    work = [(scenario, settings, index, case) for index, case in enumerate(cases)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_case_args, work))
    else:
        results = [_run_case_args(item) for item in work]
    results.sort(key=lambda case: case.index)

    outcome_counts: dict[str, int] = {}
    for case in results:
        key = case.outcome.value if case.outcome is not None else case.error or "none"
        outcome_counts[key] = outcome_counts.get(key, 0) + 1
    violations = list(baseline.violations) + [violation for case in results for violation in case.violations]
    return SweepReport(
        scenario=Path(path).stem,
        spec=spec.value,
        message_cases=message_cases,
        crash_cases=crash_cases,
        store_fault_cases=store_fault_cases,
        total_cases=len(results),
        arithmetic=arithmetic,
        outcome_counts=dict(sorted(outcome_counts.items())),
        cases=results,
        violations=violations,
        wall_time_s=round(time.perf_counter() - started, 3),
        digest=report_digest(results),
    )


def sweep_exit_code(report: SweepReport, scenario: Scenario) -> int:
    if scenario.expect_violation:
        return EXIT_EXPECTED_VIOLATION if report.violations else EXIT_VIOLATION
    return EXIT_VIOLATION if report.violations else EXIT_OK

