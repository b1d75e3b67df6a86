"""Security predicates evaluated over a finished trace.

Every check reads the trace alone, so a trace written by ``keyfort run`` can
be re-checked later. Each returns the violations it finds, tagged with the
index of the first offending event.
"""

import logging
from collections import defaultdict
from typing import TYPE_CHECKING, Callable, Optional

from enclave_sim import replay_chain
from models.enclave import EnclavePhase
from models.envelope import MessageKind
from models.outcome import Violation
from models.trace import Trace, TraceEvent

if TYPE_CHECKING:
    from world import World

logger = logging.getLogger(__name__)

AUTHENTICITY = "authenticity"
INTEGRITY = "integrity"
SOFTWARE_ROLLBACK = "software-rollback"
ATOMICITY = "atomicity"
STATE_CONTINUITY = "state-continuity"
CLONE_BOUND = "clone-bound"
COUNTER_MONOTONICITY = "counter-monotonicity"
TIME_MONOTONICITY = "time-monotonicity"
TRUSTED_TIME = "trusted-time"

# verdicts where a handler may legitimately have changed SM state
_STATE_CHANGING_VERDICTS = frozenset({"accepted", "down", "crashed", "ignored", "StoreFault"})

Check = Callable[[Trace], list[Violation]]


def _deliveries(trace: Trace) -> list[tuple[int, TraceEvent]]:
    return [(index, event) for index, event in enumerate(trace) if event.detail.get("io") == "deliver"]


def _internal(event: TraceEvent) -> bool:
    """SM-emitted events, as opposed to the send/deliver records of an envelope with the same name."""
    return "io" not in event.detail


def _is_sm_component(component: str) -> bool:
    return bool(component) and component != "P" and ":" not in component


def _authenticated(kind: str) -> bool:
    try:
        return MessageKind(kind).authenticated
    except ValueError:
        return False


def check_authenticity(trace: Trace) -> list[Violation]:
    """A rejected authenticated request must leave the receiving SM untouched."""
    violations = []
    for index, event in _deliveries(trace):
        if not _is_sm_component(event.detail.get("component", "")):
            continue
        if event.verdict in _STATE_CHANGING_VERDICTS or not _authenticated(event.kind):
            continue
        pre = event.detail.get("pre")
        if pre is not None and pre != event.sm_state_digest:
            violations.append(
                Violation(
                    predicate=AUTHENTICITY,
                    index=index,
                    message=f"{event.kind} rejected with {event.verdict} but changed {event.dst} state",
                )
            )
    return violations


def check_integrity(trace: Trace) -> list[Violation]:
    """Imported state must be byte-identical to what the matching export sealed."""
    exported: dict[tuple[str, str, str], set[str]] = defaultdict(set)
    violations = []
    for index, event in enumerate(trace):
        session = (event.detail.get("id", ""), event.detail.get("eid_S", ""), event.detail.get("eid_D", ""))
        if event.kind == "Export":
            exported[session].add(event.detail.get("state", ""))
        elif event.kind == "Import":
            state = event.detail.get("state", "")
            if state not in exported.get(session, set()):
                violations.append(
                    Violation(
                        predicate=INTEGRITY,
                        index=index,
                        message=f"enclave {event.eid} on {event.src} imported a state nobody exported",
                    )
                )
    return violations


def check_software_rollback(trace: Trace) -> list[Violation]:
    """No init may be accepted below the newest version ever committed for that software."""
    newest: dict[tuple[str, str], int] = {}
    violations = []
    for index, event in enumerate(trace):
        key = (event.src, event.detail.get("id", ""))
        if event.kind == "Version":
            newest[key] = max(newest.get(key, 0), int(event.detail["v_latest"]))
        elif event.kind == "Init" and event.verdict == "accepted" and _internal(event):
            version = int(event.detail["v"])
            if key in newest and version < newest[key]:
                violations.append(
                    Violation(
                        predicate=SOFTWARE_ROLLBACK,
                        index=index,
                        message=f"{event.src} accepted version {version} after committing {newest[key]}",
                    )
                )
    return violations


def check_atomicity(trace: Trace) -> list[Violation]:
    """Source and destination of one operation are never Running at the same instant."""
    pairs: set[tuple[tuple[str, str], tuple[str, str]]] = set()
    running: set[tuple[str, str]] = set()
    reported: set = set()
    violations = []
    for index, event in enumerate(trace):
        if event.kind == "Record":
            source = (event.detail.get("pk_S", ""), event.detail.get("eid_S", ""))
            destination = (event.detail.get("pk_D", ""), event.detail.get("eid_D", ""))
            pairs.add((source, destination))
        elif event.kind in ("Phase", "Final") and event.eid is not None:
            instance = (event.src, str(event.eid))
            if event.verdict == EnclavePhase.RUNNING.value:
                running.add(instance)
            else:
                running.discard(instance)
        else:
            continue
        for pair in sorted(pairs - reported):
            if pair[0] in running and pair[1] in running:
                reported.add(pair)
                violations.append(
                    Violation(
                        predicate=ATOMICITY,
                        index=index,
                        message=f"{pair[0][0]}:e{pair[0][1]} and {pair[1][0]}:e{pair[1][1]} both Running",
                    )
                )
    return violations


def check_state_continuity(trace: Trace) -> list[Violation]:
    """Each input is processed once, and the survivor's state is the replay of every accepted input."""
    operations = trace.of_kind("Operation")
    if not operations:
        return []
    operation = operations[0]
    software_id = operation.detail.get("id", "")
    violations = []

    seen: dict[str, int] = {}
    accepted: list[bytes] = []
    for index, event in enumerate(trace):
        if event.kind != "Input" or event.verdict != "accepted" or event.detail.get("id") != software_id:
            continue
        number = event.detail.get("input", "")
        if number in seen:
            violations.append(
                Violation(
                    predicate=STATE_CONTINUITY,
                    index=index,
                    message=f"input #{number} processed again (first at event {seen[number]})",
                )
            )
            continue
        seen[number] = index
        accepted.append(bytes.fromhex(event.detail.get("data", "")))

    heaps = [
        event.detail.get("heap")
        for event in trace.of_kind("Boot")
        if event.src == operation.detail.get("source") and str(event.eid) == operation.detail.get("eid_S")
    ]
    expected_chain = replay_chain(accepted).hex()
    for index, event in enumerate(trace):
        if event.kind != "Final" or event.verdict != EnclavePhase.RUNNING.value:
            continue
        if event.detail.get("id") != software_id or "chain" not in event.detail:
            continue
        if event.detail["chain"] != expected_chain:
            violations.append(
                Violation(
                    predicate=STATE_CONTINUITY,
                    index=index,
                    message=f"{event.src}:e{event.eid} state is not the replay of the {len(accepted)} accepted inputs",
                )
            )
        elif heaps and event.detail.get("heap") != heaps[0]:
            violations.append(
                Violation(
                    predicate=STATE_CONTINUITY,
                    index=index,
                    message=f"{event.src}:e{event.eid} lost the provisioned heap",
                )
            )
    return violations


def check_clone_bound(trace: Trace) -> list[Violation]:
    """At most N live enclaves per measurement and device."""
    live: dict[tuple[str, str], set[str]] = defaultdict(set)
    measurement_of: dict[tuple[str, str], str] = {}
    violations = []
    for index, event in enumerate(trace):
        instance = (event.src, str(event.eid))
        if event.kind == "Init" and event.verdict == "accepted" and _internal(event):
            key = (event.src, event.detail.get("m", ""))
            measurement_of[instance] = key[1]
            live[key].add(instance[1])
            bound = int(event.detail.get("N", "1"))
            if len(live[key]) > bound:
                violations.append(
                    Violation(
                        predicate=CLONE_BOUND,
                        index=index,
                        message=f"{len(live[key])} live instances on {event.src}, bound is {bound}",
                    )
                )
        elif event.kind == "Phase" and event.verdict == EnclavePhase.DESTROYED.value and instance in measurement_of:
            live[(event.src, measurement_of[instance])].discard(instance[1])
    return violations


def check_counter_monotonicity(trace: Trace) -> list[Violation]:
    """Every reading of a counter is at least the previous one until it is freed."""
    last: dict[tuple[str, str], int] = {}
    violations = []
    for index, event in enumerate(trace):
        if event.kind not in ("Counter", "Seal", "Unseal"):
            continue
        key = (event.src, event.detail.get("ctr", ""))
        if event.kind == "Counter" and event.verdict == "freed":
            last.pop(key, None)
            continue
        raw = event.detail.get("value" if event.kind == "Counter" else "counter")
        if raw is None:
            continue
        value = int(raw)
        if key in last and value < last[key]:
            violations.append(
                Violation(
                    predicate=COUNTER_MONOTONICITY,
                    index=index,
                    message=f"counter {key[1]} on {event.src} went from {last[key]} to {value}",
                )
            )
        last[key] = value
    return violations


def check_time_monotonicity(trace: Trace) -> list[Violation]:
    violations = []
    for index in range(1, len(trace)):
        if trace[index].t < trace[index - 1].t:
            violations.append(
                Violation(
                    predicate=TIME_MONOTONICITY,
                    index=index,
                    message=f"time went back from {trace[index - 1].t} to {trace[index].t}",
                )
            )
    return violations


def check_trusted_time(trace: Trace) -> list[Violation]:
    return [
        Violation(
            predicate=TRUSTED_TIME,
            index=index,
            message=f"enclave {event.eid} measured {event.detail['measured']} ticks, scheduled {event.detail['expected']}",
        )
        for index, event in enumerate(trace)
        if event.kind == "LocalTime" and event.detail.get("measured") != event.detail.get("expected")
    ]


CHECKS: dict[str, Check] = {
    AUTHENTICITY: check_authenticity,
    INTEGRITY: check_integrity,
    SOFTWARE_ROLLBACK: check_software_rollback,
    ATOMICITY: check_atomicity,
    STATE_CONTINUITY: check_state_continuity,
    CLONE_BOUND: check_clone_bound,
    COUNTER_MONOTONICITY: check_counter_monotonicity,
    TIME_MONOTONICITY: check_time_monotonicity,
    TRUSTED_TIME: check_trusted_time,
}


def check_predicates(trace: Trace, world: Optional["World"] = None) -> list[Violation]:
    """Run every check and return the violations ordered by trace index.

    With a live ``world`` the terminal enclave table is checked as well, so a
    both-Running end state is caught even if its events were never recorded.
    """
    violations = [violation for check in CHECKS.values() for violation in check(trace)]
    if world is not None:
        source, destination = world.operation_enclaves()
        if (
            source is not None
            and destination is not None
            and source.phase == EnclavePhase.RUNNING
            and destination.phase == EnclavePhase.RUNNING
        ):
            violations.append(
                Violation(
                    predicate=ATOMICITY,
                    index=max(len(trace) - 1, 0),
                    message="source and destination both Running at the end of the run",
                )
            )
    if violations:
        logger.warning("predicates violated", extra={"count": len(violations)})
    return sorted(violations, key=lambda violation: (violation.index, violation.predicate))
