"""Security Monitor: enclave lifecycle, trusted time, state continuity and the
update/migration protocol state machine of one simulated device.

The SM never talks to the network itself. Messages it originates are queued
on ``outbox`` and drained by the world after every call; everything it wants
recorded in the trace goes through ``observer``.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from random import Random
from typing import Callable, Iterator, Optional

from crypto_shim import (
    KeyDirectory,
    attest_sign,
    derive_transport_key,
    digest,
    measure,
    public_key_id,
    sealing_key,
)
from errors import (
    AlreadyMigrating,
    AlreadyScheduled,
    CloneLimitExceeded,
    EnclaveExists,
    InvalidCloneBound,
    KeyfortError,
    MeasurementBlacklisted,
    MeasurementMismatch,
    NoActiveMigration,
    NoEligibleEnclave,
    NotDestination,
    NotMyKey,
    OwnerMismatch,
    ResumeDenied,
    StoreFault,
    TooManyInstances,
    Unauthorized,
    UnknownCounter,
    UnknownEnclave,
    VersionMismatch,
    VersionOrderViolation,
)
from models.attestation import AttestationReport
from models.codec import CanonicalWriter
from models.counters import MonotonicCounter, VersionEntry
from models.enclave import EnclavePhase, EnclaveRecord, new_enclave_record
from models.envelope import CrashStage, MessageKind
from models.messages import ExecSwitchMsg, Payload, SessionMsg, SignalMsg, TimeoutNoticeMsg
from models.migration import MigrationRecord, TargetOp
from persistence import (
    SecureStore,
    drop_migration_metadata,
    load_blacklist,
    load_counters,
    load_migration_metadata,
    load_schedule,
    load_versions,
    persist_blacklist,
    persist_counters,
    persist_migration_metadata,
    persist_schedule,
    persist_versions,
)
from settings import Settings
from vclock import ContextSwitch, VirtualClock, enclave_local_time, on_context_switch, rdtime

Observer = Callable[[str, Optional[int], str, dict], None]


class Origin(str, Enum):
    PARTY = "Party"
    REMOTE_SM = "RemoteSM"


@dataclass(frozen=True)
class RemoteSM:
    """The source SM's view of a commit forwarded by the destination SM (4n)."""

    pk: bytes
    ID: bytes
    eid_S: int
    eid_D: int


@dataclass(frozen=True)
class Outbound:
    kind: MessageKind
    dst: bytes
    payload: bytes
    dst_eid: Optional[int] = None


@dataclass
class PendingAck:
    deadline: int
    resends: int = 0


class SecurityMonitor:
    def __init__(
        self,
        name: str,
        device_key: bytes,
        store: SecureStore,
        clock: VirtualClock,
        directory: KeyDirectory,
        authorized_parties: set[bytes],
        settings: Optional[Settings] = None,
        rng: Optional[Random] = None,
        alarm_sink: Optional[Callable[[MigrationRecord], None]] = None,
        observer: Optional[Observer] = None,
    ) -> None:
        self.name = name
        self.device_key = device_key
        self.device_pk = public_key_id(device_key)
        self.store = store
        self.clock = clock
        self.directory = directory
        self.authorized_parties = set(authorized_parties)
        self.settings = settings or Settings()
        self.rng = rng or Random(0)
        self.alarm_sink = alarm_sink
        self.observer = observer
        self.crash_hook: Optional[Callable[[CrashStage], None]] = None

        self.enclaves: dict[int, EnclaveRecord] = {}
        self.sw_versions: dict[bytes, VersionEntry] = {}
        self.monotonic_counters: dict[int, MonotonicCounter] = {}
        self.scheduled_migrations: list[bytes] = []
        self.migrations: dict[bytes, MigrationRecord] = {}
        self.blacklist: set[bytes] = set()
        self.hart_eid: Optional[int] = None
        self.outbox: list[Outbound] = []
        self.down = False
        self.halted = False

        self._next_eid = 1
        self._next_ctr_id = 1
        self._pending_acks: dict[bytes, PendingAck] = {}
        self._completed: set[tuple[bytes, int, int]] = set()

        self._logger = logging.getLogger(__name__)

    # -- helpers ---------------------------------------------------------

    def _emit(self, kind: str, eid: Optional[int], verdict: str, **detail) -> None:
        if self.observer is not None:
            self.observer(kind, eid, verdict, detail)

    def _send(self, kind: MessageKind, dst: bytes, payload: Payload, dst_eid: Optional[int] = None) -> None:
        self.outbox.append(Outbound(kind, dst, payload.encode(), dst_eid))

    def _signal_enclave(self, kind: MessageKind, eid: int) -> None:
        self._send(kind, self.device_pk, SignalMsg(eid=eid), dst_eid=eid)

    def _reach(self, stage: CrashStage) -> None:
        self._emit("Stage", None, stage.value)
        if self.crash_hook is not None:
            self.crash_hook(stage)

    def _now(self) -> int:
        return rdtime(self.clock)

    def _authorize(self, caller_pk: bytes) -> None:
        if caller_pk not in self.authorized_parties:
            raise Unauthorized(f"{caller_pk[:4].hex()} is not an authorized party")

    def live_record(self, eid: int) -> EnclaveRecord:
        record = self.enclaves.get(eid)
        if record is None or not record.live:
            raise UnknownEnclave(f"no live enclave {eid} on {self.name}")
        return record

    def live_with(self, predicate: Callable[[EnclaveRecord], bool]) -> list[EnclaveRecord]:
        return [record for record in self.enclaves.values() if record.live and predicate(record)]

    def _set_phase(self, record: EnclaveRecord, phase: EnclavePhase) -> None:
        if record.phase == phase:
            return
        record.phase = phase
        self._emit("Phase", record.eid, phase.value, id=record.ID.hex())

    def _pause(self, record: EnclaveRecord) -> None:
        if record.phase == EnclavePhase.RUNNING:
            self._set_phase(record, EnclavePhase.PAUSED)
        if self.hart_eid == record.eid:
            self.hart_eid = None

    def _persist_versions(self, entries: dict[bytes, VersionEntry]) -> None:
        persist_versions(self.store, entries.values())

    def _commit_version(self, software_id: bytes, version: int) -> None:
        current = self.sw_versions.get(software_id)
        if current is not None and current.v_latest >= version:
            return
        entries = dict(self.sw_versions)
        entries[software_id] = VersionEntry(ID=software_id, v_latest=version)
        self._persist_versions(entries)
        self.sw_versions = entries
        self._emit("Version", None, "committed", id=software_id.hex(), v_latest=version)

    def _persist_record(self, record: MigrationRecord) -> None:
        persist_migration_metadata(self.store, record)

    def _with_retries(self, action: Callable[[], None]) -> None:
        """Run a write that can no longer be rolled back, retrying transient store faults."""
        for attempt in range(self.settings.store_retries + 1):
            try:
                action()
                return
            except StoreFault:
                if attempt == self.settings.store_retries:
                    raise
                self._logger.warning("store write failed, retrying", extra={"device": self.name, "attempt": attempt + 1})

    def _drop_record(self, record: MigrationRecord) -> None:
        self._with_retries(lambda: drop_migration_metadata(self.store, record.ID))
        self.migrations.pop(record.ID, None)
        self._pending_acks.pop(record.ID, None)
        self._emit("RecordCleared", None, record.target_op.value, id=record.ID.hex())

    def state_digest(self) -> str:
        """Digest over the canonical SM state; key material and seeds are left out."""
        writer = CanonicalWriter().bytes_(self.device_pk)
        writer.uint(len(self.enclaves))
        for eid in sorted(self.enclaves):
            writer.raw(self.enclaves[eid].canonical_bytes())
        writer.uint(len(self.sw_versions))
        for software_id in sorted(self.sw_versions):
            writer.raw(self.sw_versions[software_id].canonical_bytes())
        writer.uint(len(self.monotonic_counters))
        for ctr_id in sorted(self.monotonic_counters):
            writer.raw(self.monotonic_counters[ctr_id].canonical_bytes())
        writer.uint(len(self.scheduled_migrations))
        for software_id in self.scheduled_migrations:
            writer.bytes_(software_id)
        writer.uint(len(self.migrations))
        for software_id in sorted(self.migrations):
            writer.raw(self.migrations[software_id].canonical_bytes(include_seed=False))
        writer.uint(len(self.blacklist))
        for m in sorted(self.blacklist):
            writer.bytes_(m)
        writer.uint(self.hart_eid or 0).flag(self.down).flag(self.halted)
        return digest(writer.getvalue()).hex()

    # -- lifecycle -------------------------------------------------------

    def init(self, software_id: bytes, version: int, binary: bytes, clone_bound: int = 1) -> int:
        """Initialize an enclave after the rollback and cloning checks.

        A scheduled destination skips the equality check against v_latest
        but is still refused an older version, and starts with resume_ok false.

        Raises:
            VersionMismatch: If the version differs from v_latest (or is older, when scheduled).
            CloneLimitExceeded: If N live enclaves already share the measurement.
            MeasurementBlacklisted: If an earlier failed operation blacklisted the binary.
            StoreFault: If persisting the new state fails.
        """
        entry = self.sw_versions.get(software_id)
        latest = entry.v_latest if entry else None
        scheduled = software_id in self.scheduled_migrations
        detail = {
            "id": software_id.hex(),
            "v": version,
            "v_latest": "" if latest is None else latest,
            "scheduled": scheduled,
            "N": clone_bound,
        }
        try:
            m = measure(binary)
            detail["m"] = m.hex()
            if clone_bound < 1:
                raise InvalidCloneBound(f"clone bound must be at least 1, got {clone_bound}")
            if m in self.blacklist:
                raise MeasurementBlacklisted(f"measurement {m[:4].hex()} is blacklisted")
            if latest is not None:
                if scheduled and version < latest:
                    raise VersionMismatch(f"version {version} is older than installed {latest}")
                if not scheduled and version != latest:
                    raise VersionMismatch(f"version {version} does not match installed {latest}")
            clones = self.live_with(lambda record: record.m == m)
            if len(clones) >= clone_bound:
                raise CloneLimitExceeded(f"{len(clones)} instances already running, N={clone_bound}")

            if scheduled:
                remaining = [sid for sid in self.scheduled_migrations if sid != software_id]
                persist_schedule(self.store, remaining)
                self.scheduled_migrations = remaining
            elif latest is None:
                self._commit_version(software_id, version)

            eid = self._next_eid
            self._next_eid += 1
            self.enclaves[eid] = new_enclave_record(
                software_id, version, m, eid, self._now(), N=clone_bound, resume_ok=not scheduled
            )
        except KeyfortError as exc:
            self._emit("Init", None, exc.code, **detail)
            raise
        self._emit("Init", eid, "accepted", **detail)
        self._logger.info(
            "enclave initialized",
            extra={"device": self.name, "eid": eid, "scheduled": scheduled},
        )
        return eid

    def run(self, eid: int) -> None:
        record = self.live_record(eid)
        if not record.resume_ok:
            raise ResumeDenied(f"enclave {eid} on {self.name} may not run")
        self._set_phase(record, EnclavePhase.RUNNING)

    resume = run

    def attest(self, eid: int) -> AttestationReport:
        record = self.live_record(eid)
        report = AttestationReport(m=record.m, ID=record.ID, v=record.v, N=record.N)
        return attest_sign(self.device_key, report)

    def destroy(self, eid: int) -> None:
        record = self.live_record(eid)
        if self.hart_eid == eid:
            self.hart_eid = None
        self._set_phase(record, EnclavePhase.DESTROYED)

    def _destroy_if_live(self, eid: int) -> None:
        record = self.enclaves.get(eid)
        if record is not None and record.live:
            self.destroy(eid)

    def get_sealing_key(self, caller_eid: int) -> bytes:
        return sealing_key(self.device_key, self.live_record(caller_eid).m)

    # -- trusted time ----------------------------------------------------

    def context_switch(self, direction: ContextSwitch, eid: int) -> None:
        on_context_switch(self, direction, eid, self._now())

    def enclave_local_time(self, eid: int) -> int:
        return enclave_local_time(self, eid, self._now())

    # -- scheduling ------------------------------------------------------

    def schedule_migration(self, caller_pk: bytes, software_id: bytes) -> None:
        self._authorize(caller_pk)
        if software_id in self.scheduled_migrations:
            raise AlreadyScheduled(f"{software_id!r} is already scheduled")
        if self.live_with(lambda record: record.ID == software_id):
            raise EnclaveExists(f"an enclave with {software_id!r} exists on {self.name}")
        scheduled = self.scheduled_migrations + [software_id]
        persist_schedule(self.store, scheduled)
        self.scheduled_migrations = scheduled

    def schedule_update(self, caller_pk: bytes, software_id: bytes, version: int) -> None:
        self._authorize(caller_pk)
        if software_id in self.scheduled_migrations:
            raise AlreadyScheduled(f"{software_id!r} is already scheduled")
        instances = self.live_with(lambda record: record.ID == software_id)
        if len(instances) > 1:
            raise TooManyInstances(f"{len(instances)} live instances of {software_id!r}")
        if not instances or instances[0].v >= version:
            raise NoEligibleEnclave(f"no live {software_id!r} older than version {version}")
        scheduled = self.scheduled_migrations + [software_id]
        persist_schedule(self.store, scheduled)
        self.scheduled_migrations = scheduled

    # -- state migration -------------------------------------------------

    def state_migration(
        self,
        caller_pk: bytes,
        pk_S: bytes,
        pk_D: bytes,
        eid_S: int,
        eid_D: int,
        m_S: bytes,
        m_D: bytes,
        now: Optional[int] = None,
        session_id: bytes = b"",
    ) -> MigrationRecord:
        """Open the migration record for this SM's side of an update or migration.

        Raises:
            Unauthorized: If the caller is not an authorized party.
            NotMyKey: If neither endpoint key belongs to this SM.
            MeasurementMismatch: If measurements differ from the local records or from each other.
            VersionOrderViolation: If an update does not move to a newer version of the same software.
            AlreadyMigrating: If a record already covers the software or a local enclave.
        """
        self._authorize(caller_pk)
        now = self._now() if now is None else now
        if pk_S == pk_D:
            if pk_S != self.device_pk:
                raise NotMyKey("update keys do not belong to this SM")
            target_op = TargetOp.UPDATE
            source, destination = self.live_record(eid_S), self.live_record(eid_D)
            if source.m != m_S or destination.m != m_D:
                raise MeasurementMismatch("measurements do not match the local enclaves")
            if source.ID != destination.ID or source.v >= destination.v:
                raise VersionOrderViolation(
                    f"update must move {source.ID!r} to a newer version ({source.v} -> {destination.v})"
                )
            software_id, v_D, local = source.ID, destination.v, (eid_S, eid_D)
        else:
            if m_S != m_D:
                raise MeasurementMismatch("migration requires identical measurements")
            if pk_S == self.device_pk:
                target_op, eid, m = TargetOp.MIGRATION_SOURCE, eid_S, m_S
            elif pk_D == self.device_pk:
                target_op, eid, m = TargetOp.MIGRATION_DESTINATION, eid_D, m_D
            else:
                raise NotMyKey("neither endpoint key belongs to this SM")
            record = self.live_record(eid)
            if record.m != m:
                raise MeasurementMismatch(f"enclave {eid} does not have the stated measurement")
            software_id, v_D, local = record.ID, record.v, (eid,)

        if software_id in self.migrations:
            raise AlreadyMigrating(f"{software_id!r} already has an active operation")
        for active in self.migrations.values():
            if {active.eid_S, active.eid_D} & set(local):
                raise AlreadyMigrating("a local enclave is already part of an operation")

        record = MigrationRecord(
            ID=software_id,
            target_op=target_op,
            eid_S=eid_S,
            eid_D=eid_D,
            m_S=m_S,
            m_D=m_D,
            pk_S=pk_S,
            pk_D=pk_D,
            T_SM=now + self.settings.timeout_sm,
            v_D=v_D,
            session_id=session_id,
            party_pk=caller_pk,
        )
        self._persist_record(record)
        self.migrations[software_id] = record
        self._emit(
            "Record",
            None,
            target_op.value,
            id=software_id.hex(),
            eid_S=eid_S,
            eid_D=eid_D,
            pk_S=pk_S.hex(),
            pk_D=pk_D.hex(),
            T_SM=record.T_SM,
        )
        return record

    def _find_record(self, eid_S: int, eid_D: int) -> MigrationRecord:
        for record in self.migrations.values():
            if record.eid_S == eid_S and record.eid_D == eid_D and not record.failed:
                return record
        raise NoActiveMigration(f"no active operation for ({eid_S}, {eid_D}) on {self.name}")

    def get_transport_key(self, caller_eid: int, rng: Optional[Random] = None) -> bytes:
        """Derive k for the calling enclave's active operation; stable within one session."""
        self.live_record(caller_eid)
        for record in self.migrations.values():
            if record.failed or record.source_destroyed:
                continue
            if (record.is_source_side and record.eid_S == caller_eid) or (
                record.is_destination_side and record.eid_D == caller_eid
            ):
                break
        else:
            raise NoActiveMigration(f"enclave {caller_eid} is not migrating")
        if record.s is None:
            if record.target_op == TargetOp.UPDATE:
                record.s = (rng or self.rng).randbytes(32)
            else:
                record.s = self.directory.session_key(record.pk_S, record.pk_D, record.session_id)
        return derive_transport_key(record.s, record.m_S, record.m_D)

    def execution_switch(
        self,
        origin: Origin,
        eid_S: int,
        eid_D: int,
        caller_pk: Optional[bytes] = None,
        source_deadline: Optional[int] = None,
    ) -> None:
        """Pause the source and/or activate the destination (4f, 4g; merged for updates).

        On a migration destination the deadline is pulled in below the
        source's so the destination always gives up first.
        """
        record = self._find_record(eid_S, eid_D)
        if record.target_op == TargetOp.MIGRATION_DESTINATION:
            if origin != Origin.REMOTE_SM or (caller_pk is not None and caller_pk != record.pk_S):
                raise NoActiveMigration("destination switch must come from the source SM")
            deadline = record.T_SM
            if source_deadline:
                deadline = min(deadline, source_deadline - self.settings.deadline_guard)
            if deadline <= self._now():
                raise NoActiveMigration("source deadline already passed")
            record.T_SM = deadline
            self.live_record(eid_D).resume_ok = True
            return

        if origin != Origin.PARTY:
            raise NoActiveMigration("source switch must come from the party")
        if caller_pk is not None:
            self._authorize(caller_pk)
        source = self.live_record(eid_S)
        destination = self.live_record(eid_D) if record.target_op == TargetOp.UPDATE else None
        self._pause(source)
        source.resume_ok = False
        if destination is not None:
            destination.resume_ok = True
            return
        self._send(
            MessageKind.EXEC_SWITCH,
            record.pk_D,
            ExecSwitchMsg(eid_S=eid_S, eid_D=eid_D, source_deadline=record.T_SM),
        )

    # -- commit ----------------------------------------------------------

    @contextmanager
    def _protocol_step(self, record: MigrationRecord) -> Iterator[None]:
        try:
            yield
        except StoreFault:
            self._fail_operation(record)
            raise

    def migration_commit(self, caller: int | RemoteSM) -> None:
        """Finalize an operation: enclave commit (4m) or remote commit forward (4n).

        Raises:
            NotDestination: If the calling enclave is not a destination on this SM.
            NoActiveMigration: If no matching, still-active operation exists.
        """
        if isinstance(caller, RemoteSM):
            self._on_commit_forward(caller)
            return
        record = next(
            (r for r in self.migrations.values() if r.is_destination_side and r.eid_D == caller),
            None,
        )
        if record is None:
            if any(r.eid_S == caller for r in self.migrations.values()):
                raise NotDestination(f"enclave {caller} is not a destination on {self.name}")
            raise NoActiveMigration(f"no operation for enclave {caller}")
        if record.failed or not self.live_record(caller).resume_ok:
            raise NoActiveMigration(f"operation for enclave {caller} is not active")

        if record.target_op == TargetOp.UPDATE:
            with self._protocol_step(record):
                self._commit_version(record.ID, record.v_D)
            # v_D is durable from here on, so the update only rolls forward
            self._reach(CrashStage.VERSION_PERSISTED)
            record.source_destroyed = True
            self._with_retries(lambda: self._persist_record(record))
            self._reach(CrashStage.SOURCE_DESTRUCTION_RECORDED)
            self._finish_update(record)
            return
        if record.commit_sent:
            return
        with self._protocol_step(record):
            self._persist_record(record.model_copy(update={"commit_sent": True}))
        record.commit_sent = True
        self._send(
            MessageKind.COMMIT_FORWARD,
            record.pk_S,
            SessionMsg(ID=record.ID, eid_S=record.eid_S, eid_D=record.eid_D),
        )

    def _version_committed(self, record: MigrationRecord) -> bool:
        """An update whose new version already reached the store can only roll forward."""
        entry = self.sw_versions.get(record.ID)
        return record.target_op == TargetOp.UPDATE and entry is not None and entry.v_latest >= record.v_D

    def _rolling_forward(self, record: MigrationRecord) -> bool:
        return record.source_destroyed or self._version_committed(record)

    def _finish_update(self, record: MigrationRecord) -> None:
        self._with_retries(lambda: self._commit_version(record.ID, record.v_D))
        self._destroy_if_live(record.eid_S)
        self._drop_record(record)
        self._signal_enclave(MessageKind.OK_4P, record.eid_D)
        if record.party_pk:
            self._send(MessageKind.OK_5, record.party_pk, SessionMsg(ID=record.ID, eid_S=record.eid_S, eid_D=record.eid_D))
        self._logger.info("update committed", extra={"device": self.name, "eid": record.eid_D})

    def _on_commit_forward(self, caller: RemoteSM) -> None:
        record = self.migrations.get(caller.ID)
        if (
            record is None
            or record.target_op != TargetOp.MIGRATION_SOURCE
            or (record.eid_S, record.eid_D, record.pk_D) != (caller.eid_S, caller.eid_D, caller.pk)
            or record.failed
        ):
            raise NoActiveMigration("no matching source-side operation")
        if not record.source_destroyed:
            with self._protocol_step(record):
                self._persist_record(record.model_copy(update={"source_destroyed": True}))
            record.source_destroyed = True
            self._reach(CrashStage.SOURCE_DESTRUCTION_RECORDED)
            self._destroy_if_live(record.eid_S)
            self._pending_acks[record.ID] = PendingAck(deadline=self._now() + self.settings.timeout_ack)
        self._send_commit_ack(record)

    def _send_commit_ack(self, record: MigrationRecord) -> None:
        self._send(
            MessageKind.OK_4O,
            record.pk_D,
            SessionMsg(ID=record.ID, eid_S=record.eid_S, eid_D=record.eid_D),
        )

    def on_commit_ack(self, caller_pk: bytes, software_id: bytes, eid_S: int, eid_D: int) -> None:
        """Destination side of 4o: the source enclave is gone, finish and confirm (4p, 4q)."""
        record = self.migrations.get(software_id)
        session = (software_id, eid_S, eid_D)
        if record is None or (record.eid_S, record.eid_D) != (eid_S, eid_D):
            if session in self._completed:
                self._send(MessageKind.OK_4Q, caller_pk, SessionMsg(ID=software_id, eid_S=eid_S, eid_D=eid_D))
                return
            raise NoActiveMigration("no matching destination-side operation")
        if (
            record.target_op != TargetOp.MIGRATION_DESTINATION
            or record.pk_S != caller_pk
            or record.failed
            or not record.commit_sent
        ):
            raise NoActiveMigration("destination is not waiting for a commit acknowledgement")
        # the source already destroyed E_S before sending 4o: E_D must survive
        record.source_destroyed = True
        self._with_retries(lambda: self._persist_record(record))
        self._reach(CrashStage.SOURCE_DESTRUCTION_RECORDED)
        self._finish_destination(record)

    def _finish_destination(self, record: MigrationRecord) -> None:
        self._with_retries(lambda: self._commit_version(record.ID, record.v_D))
        self._reach(CrashStage.VERSION_PERSISTED)
        self._drop_record(record)
        self._completed.add(record.session_key())
        self._signal_enclave(MessageKind.OK_4P, record.eid_D)
        self._send(
            MessageKind.OK_4Q,
            record.pk_S,
            SessionMsg(ID=record.ID, eid_S=record.eid_S, eid_D=record.eid_D),
        )
        self._logger.info("migration committed at destination", extra={"device": self.name, "eid": record.eid_D})

    def on_commit_confirmed(self, caller_pk: bytes, software_id: bytes, eid_S: int, eid_D: int) -> None:
        """Source side of 4q: clear the record and report success to the party (5)."""
        record = self.migrations.get(software_id)
        if (
            record is None
            or record.target_op != TargetOp.MIGRATION_SOURCE
            or (record.eid_S, record.eid_D, record.pk_D) != (eid_S, eid_D, caller_pk)
            or not record.source_destroyed
        ):
            raise NoActiveMigration("no source-side operation awaiting confirmation")
        self._drop_record(record)
        if record.party_pk:
            self._send(MessageKind.OK_5, record.party_pk, SessionMsg(ID=software_id, eid_S=eid_S, eid_D=eid_D))

    # -- failure handling ------------------------------------------------

    def _notify_failure(self, record: MigrationRecord, dst: bytes, dest_inactive: bool, reason: str) -> None:
        self._send(
            MessageKind.TIMEOUT_NOTICE,
            dst,
            TimeoutNoticeMsg(
                ID=record.ID,
                eid_S=record.eid_S,
                eid_D=record.eid_D,
                dest_inactive=dest_inactive,
                reason=reason,
            ),
        )

    def _resume_source(self, record: MigrationRecord) -> None:
        source = self.enclaves.get(record.eid_S)
        if source is not None and source.live:
            source.resume_ok = True
            self._signal_enclave(MessageKind.TIMEOUT_NOTICE, record.eid_S)

    def _expire(self, record: MigrationRecord, reason: str) -> None:
        """Roll back one operation: destinations destroy E_D, sources resume E_S."""
        self._logger.warning(
            "operation failed",
            extra={"device": self.name, "op": record.target_op.value, "reason": reason},
        )
        self._emit("Expire", None, reason, id=record.ID.hex(), op=record.target_op.value)
        if record.target_op == TargetOp.UPDATE:
            self._destroy_if_live(record.eid_D)
            self._drop_record(record)
            self._resume_source(record)
        elif record.target_op == TargetOp.MIGRATION_DESTINATION:
            self._destroy_if_live(record.eid_D)
            self._drop_record(record)
            self._notify_failure(record, record.pk_S, dest_inactive=True, reason=reason)
        else:
            self._drop_record(record)
            self._resume_source(record)
            self._notify_failure(record, record.pk_D, dest_inactive=False, reason=reason)
        if record.party_pk:
            self._notify_failure(record, record.party_pk, dest_inactive=True, reason=reason)

    def _fail_operation(self, record: MigrationRecord) -> None:
        """SM failure: a persistence step of an active operation did not go through."""
        if record.ID not in self.migrations or self._rolling_forward(record):
            return
        if record.target_op == TargetOp.MIGRATION_SOURCE:
            # E_D may still run: E_S resumes once the destination confirms, or at T_SM
            record.failed = True
            self._notify_failure(record, record.pk_D, dest_inactive=False, reason="sm-failure")
            if record.party_pk:
                self._notify_failure(record, record.party_pk, dest_inactive=False, reason="sm-failure")
            return
        self._blacklist(record.m_D)
        self._expire(record, "sm-failure")

    def _blacklist(self, m: bytes) -> None:
        self.blacklist = self.blacklist | {m}
        try:
            self._with_retries(lambda: persist_blacklist(self.store, self.blacklist))
        except StoreFault:
            self._logger.error("blacklist not persisted", extra={"device": self.name, "m": m[:4].hex()})

    def on_timeout_notice(
        self,
        caller_pk: bytes,
        software_id: bytes,
        eid_S: int,
        eid_D: int,
        dest_inactive: bool,
    ) -> None:
        """Mirror a remote SM's failure handling for the same session."""
        record = self.migrations.get(software_id)
        if record is not None:
            if (record.eid_S, record.eid_D) != (eid_S, eid_D):
                return
            if record.target_op == TargetOp.MIGRATION_DESTINATION and caller_pk == record.pk_S:
                self._expire(record, "remote")
            elif (
                record.target_op == TargetOp.MIGRATION_SOURCE
                and caller_pk == record.pk_D
                and dest_inactive
                and not record.source_destroyed
            ):
                self._drop_record(record)
                self._resume_source(record)
                if record.party_pk:
                    self._notify_failure(record, record.party_pk, dest_inactive=True, reason="remote")
            return
        # a source gave up on a session this destination never opened
        stale = self.enclaves.get(eid_D)
        if (
            stale is not None
            and stale.live
            and stale.ID == software_id
            and not stale.resume_ok
            and not dest_inactive
            and caller_pk != self.device_pk
            and (software_id, eid_S, eid_D) not in self._completed
        ):
            self.destroy(eid_D)

    def next_deadline(self) -> Optional[int]:
        if self.down or self.halted:
            return None
        deadlines = [record.T_SM for record in self.migrations.values() if not self._rolling_forward(record)]
        deadlines += [pending.deadline for pending in self._pending_acks.values()]
        return min(deadlines, default=None)

    def sm_timeout_tick(self, now: Optional[int] = None) -> None:
        now = self._now() if now is None else now
        for software_id in sorted(self.migrations):
            record = self.migrations.get(software_id)
            if record is None:
                continue
            if self._rolling_forward(record):
                continue
            if now >= record.T_SM:
                self._expire(record, "timeout")
        for software_id in sorted(self._pending_acks):
            pending = self._pending_acks.get(software_id)
            if pending is None or now < pending.deadline:
                continue
            record = self.migrations.get(software_id)
            if record is None:
                self._pending_acks.pop(software_id, None)
            elif pending.resends < self.settings.resend_limit:
                pending.resends += 1
                pending.deadline = now + self.settings.timeout_ack
                self._send_commit_ack(record)
            else:
                self._raise_alarm(record)

    def _raise_alarm(self, record: MigrationRecord) -> None:
        self._logger.error(
            "commit confirmation missing after resends",
            extra={"device": self.name, "eid_S": record.eid_S, "eid_D": record.eid_D},
        )
        self._emit("Alarm", None, "raised", id=record.ID.hex(), eid_S=record.eid_S, eid_D=record.eid_D)
        self._drop_record(record)
        if record.party_pk:
            self._send(
                MessageKind.ALARM,
                record.party_pk,
                SessionMsg(ID=record.ID, eid_S=record.eid_S, eid_D=record.eid_D),
            )
        if self.alarm_sink is not None:
            self.alarm_sink(record)

    # -- monotonic counters ----------------------------------------------

    def _owned_counter(self, caller_eid: int, ctr_ID: int) -> MonotonicCounter:
        caller = self.live_record(caller_eid)
        counter = self.monotonic_counters.get(ctr_ID)
        if counter is None:
            raise UnknownCounter(f"no counter {ctr_ID} on {self.name}")
        if counter.owner != caller.ID:
            raise OwnerMismatch(f"counter {ctr_ID} belongs to another software identifier")
        return counter

    def allocate_mc(self, caller_eid: int) -> int:
        caller = self.live_record(caller_eid)
        counter = MonotonicCounter(ctr_ID=self._next_ctr_id, ctr_val=0, owner=caller.ID)
        counters = dict(self.monotonic_counters)
        counters[counter.ctr_ID] = counter
        persist_counters(self.store, counters.values(), self._next_ctr_id + 1)
        self.monotonic_counters = counters
        self._next_ctr_id += 1
        self._emit("Counter", caller_eid, "allocated", ctr=counter.ctr_ID, value=0)
        return counter.ctr_ID

    def get_mc_value(self, caller_eid: int, ctr_ID: int) -> int:
        return self._owned_counter(caller_eid, ctr_ID).ctr_val

    def inc_mc(self, caller_eid: int, ctr_ID: int) -> int:
        counter = self._owned_counter(caller_eid, ctr_ID)
        bumped = counter.model_copy(update={"ctr_val": counter.ctr_val + 1})
        counters = dict(self.monotonic_counters)
        counters[ctr_ID] = bumped
        persist_counters(self.store, counters.values(), self._next_ctr_id)
        self.monotonic_counters = counters
        self._emit("Counter", caller_eid, "incremented", ctr=ctr_ID, value=bumped.ctr_val)
        return bumped.ctr_val

    def free_mc(self, caller_eid: int, ctr_ID: int) -> None:
        self._owned_counter(caller_eid, ctr_ID)
        counters = {key: value for key, value in self.monotonic_counters.items() if key != ctr_ID}
        persist_counters(self.store, counters.values(), self._next_ctr_id)
        self.monotonic_counters = counters
        self._emit("Counter", caller_eid, "freed", ctr=ctr_ID)

    # -- crash and recovery ----------------------------------------------

    def crash(self) -> None:
        """Lose volatile state. Enclave memory survives, but nothing keeps running."""
        self._logger.warning("security monitor crashed", extra={"device": self.name})
        self.down = True
        for eid in sorted(self.enclaves):
            self._pause(self.enclaves[eid])
        self.hart_eid = None
        self.sw_versions = {}
        self.monotonic_counters = {}
        self.scheduled_migrations = []
        self.migrations = {}
        self._pending_acks = {}
        self._completed = set()
        self.blacklist = set()
        self.outbox = []

    def recover(self) -> None:
        """Reload persisted state and resolve every operation that was in flight.

        Raises:
            RollbackDetected: If the store presents a stale snapshot; the SM stays halted.
            StoreTampered: If a snapshot fails its MAC; the SM stays halted.
        """
        try:
            versions = load_versions(self.store)
            counters, next_ctr_id = load_counters(self.store)
            scheduled = load_schedule(self.store)
            records = load_migration_metadata(self.store)
            blacklist = load_blacklist(self.store)
        except KeyfortError:
            self.halted = True
            self._logger.error("refusing to boot from the presented store", extra={"device": self.name})
            raise
        self.down = False
        self.sw_versions = {entry.ID: entry for entry in versions}
        self.monotonic_counters = {counter.ctr_ID: counter for counter in counters}
        self._next_ctr_id = max(next_ctr_id, self._next_ctr_id)
        self.scheduled_migrations = scheduled
        self.migrations = {record.ID: record for record in records}
        self.blacklist = blacklist

        for record in sorted(records, key=lambda r: r.ID):
            if record.target_op == TargetOp.MIGRATION_SOURCE:
                if record.source_destroyed:
                    self._destroy_if_live(record.eid_S)
                    self._pending_acks[record.ID] = PendingAck(deadline=self._now() + self.settings.timeout_ack)
                    self._send_commit_ack(record)
                elif not record.failed:
                    record.failed = True
                    self._persist_record(record)
                    self._notify_failure(record, record.pk_D, dest_inactive=False, reason="recovery")
                    if record.party_pk:
                        self._notify_failure(record, record.party_pk, dest_inactive=False, reason="recovery")
            elif record.source_destroyed or self._version_committed(record):
                if record.target_op == TargetOp.UPDATE:
                    self._finish_update(record)
                else:
                    self._finish_destination(record)
            else:
                self._expire(record, "recovery")
        self._logger.info(
            "security monitor recovered",
            extra={"device": self.name, "records": len(records)},
        )
