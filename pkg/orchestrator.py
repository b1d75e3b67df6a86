"""Party P: drives updates and migrations and classifies how they ended.

P never retries. It waits for the acknowledgement of each request before
taking the next step, ignores stale or duplicate responses, and records a
failure when an SM reports one or when its own timeout T_P expires.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Optional

from crypto_shim import measure, public_key_id
from errors import AmbiguousTerminalState, CodecError
from models.enclave import EnclavePhase
from models.envelope import Envelope, MessageKind
from models.messages import (
    AckMsg,
    BlobMsg,
    ExecSwitchMsg,
    ExportStateMsg,
    InitMsg,
    InitResultMsg,
    Payload,
    ScheduleMigrationMsg,
    ScheduleUpdateMsg,
    StateMigrationMsg,
)
from models.outcome import OperationOutcome, OutcomeKind
from models.trace import Trace
from settings import Settings

if TYPE_CHECKING:
    from world import World

logger = logging.getLogger(__name__)

SendFn = Callable[[bytes, MessageKind, Payload, Optional[int]], None]
RecordFn = Callable[..., None]


class PartyPhase(str, Enum):
    IDLE = "Idle"
    SCHEDULING = "Scheduling"
    INITIALIZING = "Initializing"
    REGISTERING = "Registering"
    EXPORTING = "Exporting"
    SWITCHING = "Switching"
    IMPORTING = "Importing"
    DONE = "Done"
    FAILED = "Failed"

    @property
    def init_phase(self) -> bool:
        return self in (PartyPhase.SCHEDULING, PartyPhase.INITIALIZING, PartyPhase.REGISTERING)

    @property
    def terminal(self) -> bool:
        return self in (PartyPhase.DONE, PartyPhase.FAILED)


@dataclass
class OperationPlan:
    """Everything P knows about one update or migration before it starts."""

    software_id: bytes
    version: int
    binary: bytes
    source_pk: bytes
    destination_pk: bytes
    eid_S: int
    m_S: bytes
    clone_bound: int = 1
    session_id: bytes = b""
    eid_D: Optional[int] = None
    blob: Optional[BlobMsg] = None
    pending_acks: set[bytes] = field(default_factory=set)

    @property
    def is_update(self) -> bool:
        return self.source_pk == self.destination_pk

    @property
    def m_D(self) -> bytes:
        return measure(self.binary)


class Party:
    def __init__(self, key: bytes, send: SendFn, record: RecordFn, settings: Optional[Settings] = None) -> None:
        self.key = key
        self.pk = public_key_id(key)
        self.settings = settings or Settings()
        self.phase = PartyPhase.IDLE
        self.plan: Optional[OperationPlan] = None
        self.deadline: Optional[int] = None
        self.crashed = False
        self._send = send
        self._record = record

    def start(self, plan: OperationPlan, now: int) -> None:
        """Send step 1 and arm T_P."""
        self.plan = plan
        self.deadline = now + self.settings.timeout_party
        self.phase = PartyPhase.SCHEDULING
        if plan.is_update:
            self._send(plan.destination_pk, MessageKind.SCHEDULE_UPDATE, ScheduleUpdateMsg(ID=plan.software_id, v=plan.version), None)
        else:
            self._send(plan.destination_pk, MessageKind.SCHEDULE_MIGRATION, ScheduleMigrationMsg(ID=plan.software_id), None)
        logger.info("operation started", extra={"update": plan.is_update, "deadline": self.deadline})

    def next_deadline(self) -> Optional[int]:
        if self.crashed or self.phase.terminal:
            return None
        return self.deadline

    def on_timer(self, now: int) -> None:
        if self.deadline is not None and now >= self.deadline and not self.phase.terminal:
            self._fail("timeout")

    def _fail(self, reason: str) -> None:
        phase = "init" if self.phase.init_phase else "transfer"
        logger.warning("operation failed", extra={"phase": phase, "reason": reason})
        self._record("PartyFailure", verdict=reason, phase=phase, at=self.phase.value)
        self.phase = PartyPhase.FAILED
        self.deadline = None

    def handle(self, env: Envelope) -> bool:
        """Process one response; returns False when it was stale and ignored.

        Raises:
            CodecError: If the payload does not decode.
        """
        if self.plan is None or self.phase.terminal:
            return False
        plan = self.plan
        if env.kind == MessageKind.ACK:
            return self._on_ack(plan, env.src, AckMsg.decode(env.payload))
        if env.kind == MessageKind.INIT_RESULT and self.phase == PartyPhase.INITIALIZING:
            if env.src != plan.destination_pk:
                return False
            result = InitResultMsg.decode(env.payload)
            if not result.ok:
                self._fail(result.error)
                return True
            plan.eid_D = result.eid
            self._register(plan)
            return True
        if env.kind == MessageKind.STATE_BLOB and self.phase == PartyPhase.EXPORTING:
            if env.src != plan.source_pk:
                return False
            plan.blob = BlobMsg.decode(env.payload)
            self.phase = PartyPhase.SWITCHING
            self._send(plan.source_pk, MessageKind.EXEC_SWITCH, ExecSwitchMsg(eid_S=plan.eid_S, eid_D=plan.eid_D), None)
            return True
        if env.kind == MessageKind.OK_5 and self.phase == PartyPhase.IMPORTING:
            self.phase = PartyPhase.DONE
            self.deadline = None
            self._record("PartyDone", verdict="Committed")
            return True
        if env.kind in (MessageKind.TIMEOUT_NOTICE, MessageKind.ALARM):
            self._fail("alarm" if env.kind == MessageKind.ALARM else "notice")
            return True
        return False

    def _on_ack(self, plan: OperationPlan, src: bytes, ack: AckMsg) -> bool:
        expected = {
            PartyPhase.SCHEDULING: "1",
            PartyPhase.REGISTERING: "4",
            PartyPhase.SWITCHING: "4f",
        }.get(self.phase)
        if ack.step != expected:
            return False
        if self.phase == PartyPhase.REGISTERING and src not in plan.pending_acks:
            return False
        if not ack.ok:
            self._fail(ack.error)
            return True

        if self.phase == PartyPhase.SCHEDULING:
            self.phase = PartyPhase.INITIALIZING
            init = InitMsg(ID=plan.software_id, v=plan.version, N=plan.clone_bound, binary=plan.binary)
            self._send(plan.destination_pk, MessageKind.INIT, init, None)
        elif self.phase == PartyPhase.REGISTERING:
            plan.pending_acks.discard(src)
            if not plan.pending_acks:
                self.phase = PartyPhase.EXPORTING
                request = ExportStateMsg(eid_S=plan.eid_S, eid_D=plan.eid_D)
                self._send(plan.source_pk, MessageKind.EXPORT_STATE, request, plan.eid_S)
        else:
            self.phase = PartyPhase.IMPORTING
            self._send(plan.destination_pk, MessageKind.IMPORT_STATE, plan.blob, plan.eid_D)
        return True

    def _register(self, plan: OperationPlan) -> None:
        self.phase = PartyPhase.REGISTERING
        request = StateMigrationMsg(
            pk_S=plan.source_pk,
            pk_D=plan.destination_pk,
            eid_S=plan.eid_S,
            eid_D=plan.eid_D,
            m_S=plan.m_S,
            m_D=plan.m_D,
            session_id=plan.session_id,
        )
        plan.pending_acks = {plan.source_pk, plan.destination_pk}
        for pk in sorted(plan.pending_acks):
            self._send(pk, MessageKind.STATE_MIGRATION, request, None)


def classify_outcome(trace: Trace, world: World) -> OutcomeKind:
    """Terminal classification from enclave phases, alarms and party failures.

    Raises:
        AmbiguousTerminalState: If the terminal world matches none of the legal outcomes.
    """
    source, destination = world.operation_enclaves()
    source_phase = source.phase if source is not None else EnclavePhase.DESTROYED
    destination_phase = destination.phase if destination is not None else None
    metadata = any(device.sm.migrations for device in world.devices.values())

    if destination_phase == EnclavePhase.RUNNING and source_phase == EnclavePhase.DESTROYED:
        return OutcomeKind.COMMITTED
    if source_phase == EnclavePhase.RUNNING and destination_phase != EnclavePhase.RUNNING and not metadata:
        rejected = [
            event
            for event in trace.of_kind("PartyFailure")
            if event.detail.get("phase") == "init" and event.verdict not in ("timeout", "notice", "alarm")
        ]
        return OutcomeKind.REJECTED_AT_INIT if rejected else OutcomeKind.ABORTED_SOURCE_ACTIVE
    if (
        source_phase != EnclavePhase.RUNNING
        and destination_phase != EnclavePhase.RUNNING
        and trace.of_kind("Alarm")
    ):
        return OutcomeKind.ALARM_NEITHER_ACTIVE
    raise AmbiguousTerminalState(
        f"source {source_phase.value}, destination "
        f"{destination_phase.value if destination_phase else 'absent'}, metadata={metadata}"
    )


def operation_outcome(world: World, kind: OutcomeKind, detail: str = "") -> OperationOutcome:
    return OperationOutcome(
        kind=kind,
        final_versions=world.final_versions(),
        trace_ref=world.trace.digest(),
        detail=detail,
    )


def plan_migration(
    world: World,
    src_dev: str,
    dst_dev: str,
    software_id: bytes,
    version: int,
    binary: bytes,
) -> OperationPlan:
    source = world.devices[src_dev]
    record = world.find_enclave(src_dev, software_id)
    return OperationPlan(
        software_id=software_id,
        version=version,
        binary=binary,
        source_pk=source.pk,
        destination_pk=world.devices[dst_dev].pk,
        eid_S=record.eid,
        m_S=record.m,
        clone_bound=record.N,
        session_id=world.rng.randbytes(16),
    )


def plan_update(world: World, dev: str, software_id: bytes, v_new: int, b_new: bytes) -> OperationPlan:
    device = world.devices[dev]
    record = world.find_enclave(dev, software_id)
    return OperationPlan(
        software_id=software_id,
        version=v_new,
        binary=b_new,
        source_pk=device.pk,
        destination_pk=device.pk,
        eid_S=record.eid,
        m_S=record.m,
        clone_bound=record.N,
    )


def run_migration(
    world: World,
    src_dev: str,
    dst_dev: str,
    software_id: bytes,
    version: int,
    binary: bytes,
) -> OperationOutcome:
    """Migrate the live ``software_id`` enclave from ``src_dev`` to ``dst_dev``."""
    return _drive(world, plan_migration(world, src_dev, dst_dev, software_id, version, binary))


def run_update(world: World, dev: str, software_id: bytes, v_new: int, b_new: bytes) -> OperationOutcome:
    """Replace the live ``software_id`` enclave on ``dev`` with version ``v_new``."""
    return _drive(world, plan_update(world, dev, software_id, v_new, b_new))


def _drive(world: World, plan: OperationPlan) -> OperationOutcome:
    world.begin_operation(plan)
    world.run()
    world.finish()
    return operation_outcome(world, classify_outcome(world.trace, world))
