"""One simulated deployment: devices with their SM, store and host, the party and the fabric.

The host is eager. After every event it runs each Created or Paused enclave
whose resume_ok flag is set, so enclaves are Running whenever the SM allows it.
"""

import heapq
import logging
import tempfile
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from random import Random
from typing import Callable, Iterator, Optional

from channel import Fabric, run_until_quiescent
from crypto_shim import KeyDirectory, digest, public_key_id, storage_key
from enclave_sim import EnclaveMode, SimEnclave
from errors import (
    KeyfortError,
    NoActiveMigration,
    NotDestination,
    ResumeDenied,
    ScenarioError,
    SimulatedCrash,
    UnknownEnclave,
)
from models.enclave import EnclavePhase, EnclaveRecord
from models.envelope import CrashStage, Envelope, MessageKind
from models.messages import (
    AckMsg,
    BlobMsg,
    CommitMsg,
    ExecSwitchMsg,
    ExportStateMsg,
    InitMsg,
    InitResultMsg,
    Payload,
    ScheduleMigrationMsg,
    ScheduleUpdateMsg,
    SessionMsg,
    StateMigrationMsg,
    TimeoutNoticeMsg,
)
from models.scenario import DeviceConfig, Scenario, TimedInput
from models.trace import Trace, TraceEvent
from orchestrator import OperationPlan, Party
from persistence import FileMedia, MemoryMedia, SecureStore
from security_monitor import Origin, Outbound, RemoteSM, SecurityMonitor
from settings import Settings
from vclock import ContextSwitch, VirtualClock, rdtime

logger = logging.getLogger(__name__)

PARTY = "P"


@dataclass
class Device:
    name: str
    key: bytes
    pk: bytes
    sm: SecurityMonitor
    store: SecureStore
    enclaves: dict[int, SimEnclave] = field(default_factory=dict)
    captured: Optional[dict[str, bytes]] = None

    @property
    def up(self) -> bool:
        return not (self.sm.down or self.sm.halted)


@dataclass(order=True)
class WorldEvent:
    at: int
    order: int
    label: str = field(compare=False)
    action: Callable[[], None] = field(compare=False)


class World:
    def __init__(
        self,
        scenario: Scenario,
        settings: Optional[Settings] = None,
        store_dir: Optional[str | Path] = None,
    ) -> None:
        self.scenario = scenario
        self.settings = settings or Settings.from_env()
        self.rng = Random(scenario.seed)
        self.clock = VirtualClock(tick_period_ns=self.settings.tick_period_ns)
        self.trace = Trace()
        self.plan = scenario.faults
        self.directory = KeyDirectory(Random(self.rng.getrandbits(64)))
        self.fabric = Fabric(self.clock, self.directory, self.plan, self.settings)
        self.operation_plan: Optional[OperationPlan] = None

        self._events: list[WorldEvent] = []
        self._event_order = 0
        self._dispatches: Counter[str] = Counter()
        self._pending_crashes = list(self.plan.crashes)
        self._party_outbox: list[Outbound] = []
        self._inputs = 0
        self._operation_puts: dict[str, int] = {}
        self._tmp: Optional[tempfile.TemporaryDirectory] = None
        self._store_dir = Path(store_dir) if store_dir is not None else None

        self.party = Party(self.rng.randbytes(32), self._party_send, self._party_record, self.settings)
        authorized = {config.name for config in scenario.devices}
        if scenario.party_authorized_on is not None:
            authorized = set(scenario.party_authorized_on)
        self.devices: dict[str, Device] = {}
        for config in scenario.devices:
            self.devices[config.name] = self._build_device(config, config.name in authorized)
        self._names = {self.party.pk: PARTY}
        self._names.update({device.pk: device.name for device in self.devices.values()})
        self._names_hex = {pk.hex(): name for pk, name in self._names.items()}
        self.directory.register(*self._names)
        for point in self.plan.store_faults:
            self.device(point.component).store.arm_io_fault(point.write_index)
        for device in self.devices.values():
            self.record("Boot", src=device.name, device=device, detail={"store": device.store.mode.value})

    # -- construction ----------------------------------------------------

    def _store_root(self) -> Path:
        if self._store_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="keyfort-")
            self._store_dir = Path(self._tmp.name)
        return self._store_dir

    def _build_device(self, config: DeviceConfig, authorized: bool) -> Device:
        key = self.rng.randbytes(32)
        media = FileMedia(self._store_root() / config.name) if config.file_backed else MemoryMedia()
        store = SecureStore(storage_key(key), config.store_mode, media, name=config.name)
        sm = SecurityMonitor(
            name=config.name,
            device_key=key,
            store=store,
            clock=self.clock,
            directory=self.directory,
            authorized_parties={self.party.pk} if authorized else set(),
            settings=self.settings.merged(**config.timeouts.model_dump()),
            rng=Random(self.rng.getrandbits(64)),
        )
        device = Device(name=config.name, key=key, pk=public_key_id(key), sm=sm, store=store)
        sm.observer = partial(self._observe, device)
        sm.crash_hook = partial(self._stage_reached, device)
        return device

    def device(self, name: str) -> Device:
        try:
            return self.devices[name]
        except KeyError:
            raise ScenarioError(f"unknown device '{name}'") from None

    def close(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def install(self) -> None:
        """Initialize the scenario's enclaves and feed their inputs_before."""
        for install in self.scenario.enclaves:
            device = self.device(install.device)
            software_id = install.id.encode()
            verdict, eid = self.host_init(
                device,
                software_id,
                install.version,
                install.binary.encode(),
                install.clone_bound,
                state_size=install.state_size,
            )
            if eid is None:
                raise ScenarioError(f"install of '{install.id}' on {install.device} failed: {verdict}")
            for data in install.inputs_before:
                self.deliver_input(software_id, data.encode(), device=device, eid=eid)
        self.host_step()

    def host_init(
        self,
        device: Device,
        software_id: bytes,
        version: int,
        binary: bytes,
        clone_bound: int = 1,
        state_size: int = 0,
    ) -> tuple[str, Optional[int]]:
        """Ask the SM to create an enclave the way an untrusted host would.

        Returns the verdict and, when accepted, the new enclave id.
        """
        if not device.up:
            self.record("Init", src=device.name, verdict="halted", device=device, detail={"id": software_id.hex()})
            return "halted", None
        try:
            eid = device.sm.init(software_id, version, binary, clone_bound)
        except KeyfortError as exc:
            return exc.code, None
        mode = EnclaveMode.NORMAL if device.sm.enclaves[eid].resume_ok else EnclaveMode.AWAITING_IMPORT
        enclave = SimEnclave(eid, software_id, heap=self.rng.randbytes(state_size), mode=mode)
        device.enclaves[eid] = enclave
        self.record(
            "Boot",
            src=device.name,
            eid=eid,
            device=device,
            detail={"id": software_id.hex(), "heap": digest(enclave.heap).hex()},
        )
        self.host_step()
        return "accepted", eid

    # -- trace -----------------------------------------------------------

    def name_of(self, pk: bytes) -> str:
        return self._names.get(pk, pk[:4].hex())

    def _endpoint(self, pk: bytes, dst_eid: Optional[int]) -> str:
        name = self.name_of(pk)
        return f"{name}:e{dst_eid}" if dst_eid is not None else name

    def record(
        self,
        kind: str,
        *,
        src: str = "",
        dst: str = "",
        verdict: str = "",
        eid: Optional[int] = None,
        seq: int = -1,
        device: Optional[Device] = None,
        detail: Optional[dict] = None,
    ) -> TraceEvent:
        return self.trace.record(
            t=rdtime(self.clock),
            seq=seq,
            kind=kind,
            src=src,
            dst=dst,
            verdict=verdict,
            eid=eid,
            sm_state_digest=device.sm.state_digest() if device is not None else "",
            detail=detail,
        )

    def _observe(self, device: Device, kind: str, eid: Optional[int], verdict: str, detail: dict) -> None:
        named = {
            key: self._names_hex.get(value, value) if key in ("pk_S", "pk_D") else value
            for key, value in detail.items()
        }
        self.record(kind, src=device.name, eid=eid, verdict=verdict, device=device, detail=named)

    def _party_record(self, kind: str, verdict: str = "", **detail) -> None:
        self.record(kind, src=PARTY, verdict=verdict, detail=detail)

    # -- messaging -------------------------------------------------------

    def send(self, src: bytes, dst: bytes, kind: MessageKind, payload: bytes, dst_eid: Optional[int] = None) -> None:
        env = self.fabric.seal(src, dst, kind, payload, dst_eid)
        result = self.fabric.send(env)
        self.record(
            kind.value,
            src=self.name_of(src),
            dst=self._endpoint(dst, dst_eid),
            verdict="sent",
            seq=env.seq,
            detail={
                "io": "send",
                "occurrence": env.occurrence,
                "local": env.local,
                "fault": result.fault,
                "copies": len(result.queued),
            },
        )

    def _party_send(self, dst: bytes, kind: MessageKind, payload: Payload, dst_eid: Optional[int]) -> None:
        self._party_outbox.append(Outbound(kind, dst, payload.encode(), dst_eid))

    def _drain_party(self) -> None:
        outbound, self._party_outbox = self._party_outbox, []
        if self.party.crashed:
            return
        for out in outbound:
            self.send(self.party.pk, out.dst, out.kind, out.payload, out.dst_eid)

    def _drain(self, device: Device) -> None:
        outbound, device.sm.outbox = device.sm.outbox, []
        for out in outbound:
            self.send(device.pk, out.dst, out.kind, out.payload, out.dst_eid)

    def _component(self, env: Envelope) -> tuple[str, Optional[Device]]:
        if env.dst == self.party.pk:
            return PARTY, None
        device = next((d for d in self.devices.values() if d.pk == env.dst), None)
        if device is None:
            return self.name_of(env.dst), None
        if env.dst_eid is not None:
            return f"{device.name}:e{env.dst_eid}", device
        return device.name, device

    def _component_up(self, component: str, device: Optional[Device]) -> bool:
        if component == PARTY:
            return not self.party.crashed
        return device is not None and device.up

    def dispatch(self, env: Envelope) -> None:
        component, device = self._component(env)
        base = dict(
            kind=env.kind.value,
            src=self.name_of(env.src),
            dst=self._endpoint(env.dst, env.dst_eid),
            seq=env.seq,
        )
        detail: dict = {"io": "deliver", "occurrence": env.occurrence, "local": env.local, "component": component}
        if not self._component_up(component, device):
            self.record(**base, verdict="down", detail=detail)
            return

        index = self._dispatches[component]
        self._dispatches[component] += 1
        detail["index"] = index
        if self._take_crash(component, CrashStage.BEFORE, index):
            self.record(**base, verdict="crashed", device=device, detail=detail)
            self._crash(component)
            self.host_step()
            return

        if device is not None:
            detail["pre"] = device.sm.state_digest()
        outputs: list[Outbound] = []
        crashed = False
        if not self.fabric.verify(env):
            verdict = "auth-failed"
        else:
            try:
                verdict = self._handle(component, device, env, outputs)
            except KeyfortError as exc:
                verdict = exc.code
            except SimulatedCrash as exc:
                verdict, crashed = "crashed", True
                detail["stage"] = exc.stage
        self.record(**base, verdict=verdict, device=device, detail=detail)
        if crashed:
            self._crash(device.name)
            self.host_step()
            return

        after = self._take_crash(component, CrashStage.AFTER, index)
        if after and component not in self.devices and component != PARTY:
            # an enclave that dies after handling keeps its effects but loses its outputs
            outputs.clear()
        source = self.party.pk if component == PARTY else device.pk
        for out in outputs:
            self.send(source, out.dst, out.kind, out.payload, out.dst_eid)
        if device is not None:
            self._drain(device)
        self._drain_party()
        if after:
            self._crash(component)
        self.host_step()

    def _handle(self, component: str, device: Optional[Device], env: Envelope, outputs: list[Outbound]) -> str:
        if component == PARTY:
            return "accepted" if self.party.handle(env) else "ignored"
        if device is None:
            raise UnknownEnclave(f"no endpoint {component}")
        if env.dst_eid is not None:
            return self._handle_enclave(device, env.dst_eid, env, outputs)
        return self._handle_sm(device, env, outputs)

    @staticmethod
    def _acknowledge(env: Envelope, outputs: list[Outbound], step: str, action: Callable[[], None]) -> str:
        try:
            action()
        except KeyfortError as exc:
            outputs.append(Outbound(MessageKind.ACK, env.src, AckMsg(step=step, ok=False, error=exc.code).encode()))
            raise
        outputs.append(Outbound(MessageKind.ACK, env.src, AckMsg(step=step, ok=True).encode()))
        return "accepted"

    def _handle_sm(self, device: Device, env: Envelope, outputs: list[Outbound]) -> str:
        sm, kind = device.sm, env.kind
        if kind == MessageKind.SCHEDULE_MIGRATION:
            msg = ScheduleMigrationMsg.decode(env.payload)
            return self._acknowledge(env, outputs, "1", lambda: sm.schedule_migration(env.src, msg.ID))
        if kind == MessageKind.SCHEDULE_UPDATE:
            msg = ScheduleUpdateMsg.decode(env.payload)
            return self._acknowledge(env, outputs, "1", lambda: sm.schedule_update(env.src, msg.ID, msg.v))
        if kind == MessageKind.INIT:
            return self._init(device, env, outputs)
        if kind == MessageKind.STATE_MIGRATION:
            msg = StateMigrationMsg.decode(env.payload)
            return self._acknowledge(
                env,
                outputs,
                "4",
                lambda: sm.state_migration(
                    env.src,
                    msg.pk_S,
                    msg.pk_D,
                    msg.eid_S,
                    msg.eid_D,
                    msg.m_S,
                    msg.m_D,
                    session_id=msg.session_id,
                ),
            )
        if kind == MessageKind.EXEC_SWITCH:
            msg = ExecSwitchMsg.decode(env.payload)
            if env.src == self.party.pk:
                return self._acknowledge(
                    env,
                    outputs,
                    "4f",
                    lambda: sm.execution_switch(Origin.PARTY, msg.eid_S, msg.eid_D, caller_pk=env.src),
                )
            sm.execution_switch(
                Origin.REMOTE_SM,
                msg.eid_S,
                msg.eid_D,
                caller_pk=env.src,
                source_deadline=msg.source_deadline,
            )
        elif kind == MessageKind.COMMIT:
            if env.src != device.pk:
                raise NotDestination("commit must come from a local enclave")
            sm.migration_commit(CommitMsg.decode(env.payload).eid)
        elif kind == MessageKind.COMMIT_FORWARD:
            msg = SessionMsg.decode(env.payload)
            sm.migration_commit(RemoteSM(pk=env.src, ID=msg.ID, eid_S=msg.eid_S, eid_D=msg.eid_D))
        elif kind == MessageKind.OK_4O:
            msg = SessionMsg.decode(env.payload)
            sm.on_commit_ack(env.src, msg.ID, msg.eid_S, msg.eid_D)
        elif kind == MessageKind.OK_4Q:
            msg = SessionMsg.decode(env.payload)
            sm.on_commit_confirmed(env.src, msg.ID, msg.eid_S, msg.eid_D)
        elif kind == MessageKind.TIMEOUT_NOTICE:
            msg = TimeoutNoticeMsg.decode(env.payload)
            sm.on_timeout_notice(env.src, msg.ID, msg.eid_S, msg.eid_D, msg.dest_inactive)
        else:
            raise NoActiveMigration(f"{kind.value} is not an SM request")
        return "accepted"

    def _init(self, device: Device, env: Envelope, outputs: list[Outbound]) -> str:
        msg = InitMsg.decode(env.payload)
        try:
            eid = device.sm.init(msg.ID, msg.v, msg.binary, msg.N)
        except KeyfortError as exc:
            result = InitResultMsg(ok=False, error=exc.code)
            outputs.append(Outbound(MessageKind.INIT_RESULT, env.src, result.encode()))
            raise
        mode = EnclaveMode.NORMAL if device.sm.enclaves[eid].resume_ok else EnclaveMode.AWAITING_IMPORT
        device.enclaves[eid] = SimEnclave(eid, msg.ID, mode=mode)
        outputs.append(Outbound(MessageKind.INIT_RESULT, env.src, InitResultMsg(ok=True, eid=eid).encode()))
        return "accepted"

    @contextmanager
    def entered(self, device: Device, eid: int) -> Iterator[SimEnclave]:
        """Run enclave code on the hart, charging its local time."""
        record = device.sm.live_record(eid)
        enclave = device.enclaves.get(eid)
        if enclave is None:
            raise UnknownEnclave(f"no enclave memory for {eid} on {device.name}")
        if record.phase != EnclavePhase.RUNNING:
            raise ResumeDenied(f"enclave {eid} on {device.name} is {record.phase.value}")
        device.sm.context_switch(ContextSwitch.HOST_TO_ENCLAVE, eid)
        try:
            yield enclave
        finally:
            device.sm.context_switch(ContextSwitch.ENCLAVE_TO_HOST, eid)

    def _handle_enclave(self, device: Device, eid: int, env: Envelope, outputs: list[Outbound]) -> str:
        sm, kind = device.sm, env.kind
        if kind == MessageKind.EXPORT_STATE:
            msg = ExportStateMsg.decode(env.payload)
            with self.entered(device, eid) as enclave:
                C, M = enclave.export_state(sm.get_transport_key(eid), msg.eid_S, msg.eid_D)
            self.record(
                "Export",
                src=device.name,
                eid=eid,
                device=device,
                detail={
                    "id": enclave.ID.hex(),
                    "eid_S": msg.eid_S,
                    "eid_D": msg.eid_D,
                    "state": enclave.state_digest(),
                },
            )
            blob = BlobMsg(eid_S=msg.eid_S, eid_D=msg.eid_D, C=C, M=M)
            outputs.append(Outbound(MessageKind.STATE_BLOB, env.src, blob.encode()))
        elif kind == MessageKind.IMPORT_STATE:
            msg = BlobMsg.decode(env.payload)
            with self.entered(device, eid) as enclave:
                enclave.import_state(msg.C, msg.M, sm.get_transport_key(eid), msg.eid_S)
            self.record(
                "Import",
                src=device.name,
                eid=eid,
                device=device,
                detail={
                    "id": enclave.ID.hex(),
                    "eid_S": msg.eid_S,
                    "eid_D": eid,
                    "state": enclave.state_digest(),
                },
            )
            outputs.append(Outbound(MessageKind.COMMIT, device.pk, CommitMsg(eid=eid).encode()))
        elif kind in (MessageKind.OK_4P, MessageKind.TIMEOUT_NOTICE):
            sm.live_record(eid)
            enclave = device.enclaves.get(eid)
            if enclave is None or env.src != device.pk:
                raise UnknownEnclave(f"no local enclave {eid} on {device.name}")
            if kind == MessageKind.OK_4P:
                enclave.on_commit_signal()
            else:
                enclave.on_rollback()
        else:
            raise NoActiveMigration(f"{kind.value} is not an enclave request")
        return "accepted"

    # -- crashes ---------------------------------------------------------

    def _take_crash(self, component: str, stage: CrashStage, index: Optional[int] = None) -> bool:
        for point in self._pending_crashes:
            if point.component == component and point.stage == stage and point.dispatch_index == index:
                self._pending_crashes.remove(point)
                return True
        return False

    def _stage_reached(self, device: Device, stage: CrashStage) -> None:
        if self._take_crash(device.name, stage):
            raise SimulatedCrash(device.name, stage.value)

    def _crash(self, component: str) -> None:
        if component == PARTY:
            self.party.crashed = True
            self._party_outbox.clear()
            self.record("Crash", src=PARTY)
            return
        device = self.devices.get(component)
        if device is None:
            self.record("Crash", src=component, verdict="outputs-lost")
            return
        if device.sm.down:
            return
        device.sm.crash()
        self.record("Crash", src=device.name, device=device)
        self.schedule(rdtime(self.clock) + self.settings.restart_delay, f"restart {device.name}", partial(self._restart, device))

    def crash_device(self, name: str) -> None:
        self._crash(self.device(name).name)

    def _restart(self, device: Device) -> None:
        if self.plan.adversary_replay and device.captured is not None:
            device.store.media.present(device.captured)
            self.record("Replay", src=device.name, verdict="stale-image")
        try:
            device.sm.recover()
            verdict = "accepted"
        except KeyfortError as exc:
            verdict = exc.code
        except SimulatedCrash as exc:
            self.record("Recover", src=device.name, verdict="crashed", detail={"stage": exc.stage})
            self._crash(device.name)
            return
        self.record("Recover", src=device.name, verdict=verdict, device=device)
        self._drain(device)

    def capture_stores(self) -> None:
        """Adversary snapshot of every store, re-presented at restarts when replay is planned."""
        for device in self.devices.values():
            device.captured = device.store.media.capture()

    # -- timers ----------------------------------------------------------

    def schedule(self, at: int, label: str, action: Callable[[], None]) -> None:
        heapq.heappush(self._events, WorldEvent(at, self._event_order, label, action))
        self._event_order += 1

    def schedule_inputs(self, software_id: bytes, inputs: list[TimedInput]) -> None:
        for item in inputs:
            self.schedule(item.at, "input", partial(self.deliver_input, software_id, item.data.encode()))

    def next_timer(self) -> Optional[int]:
        candidates = [self._events[0].at] if self._events else []
        for device in self.devices.values():
            deadline = device.sm.next_deadline() if device.up else None
            if deadline is not None:
                candidates.append(deadline)
        party_deadline = self.party.next_deadline()
        if party_deadline is not None:
            candidates.append(party_deadline)
        return min(candidates, default=None)

    def fire_timers(self) -> None:
        now = rdtime(self.clock)
        while self._events and self._events[0].at <= now:
            heapq.heappop(self._events).action()
        for device in self.devices.values():
            if not device.up:
                continue
            deadline = device.sm.next_deadline()
            if deadline is None or deadline > now:
                continue
            try:
                device.sm.sm_timeout_tick(now)
            except KeyfortError as exc:
                self.record("Timer", src=device.name, verdict=exc.code, device=device)
            self._drain(device)
        party_deadline = self.party.next_deadline()
        if party_deadline is not None and party_deadline <= now:
            self.party.on_timer(now)
            self._drain_party()
        self.host_step()

    def host_step(self) -> None:
        for device in self.devices.values():
            if not device.up:
                continue
            for eid in sorted(device.sm.enclaves):
                record = device.sm.enclaves[eid]
                if record.live and record.resume_ok and record.phase in (EnclavePhase.CREATED, EnclavePhase.PAUSED):
                    device.sm.run(eid)

    # -- operations ------------------------------------------------------

    def deliver_input(
        self,
        software_id: bytes,
        data: bytes,
        device: Optional[Device] = None,
        eid: Optional[int] = None,
    ) -> str:
        """Feed one client input to the running instance of ``software_id``."""
        index = self._inputs
        self._inputs += 1
        detail = {"id": software_id.hex(), "input": index, "data": data.hex()}
        if device is None:
            device, eid = self._running_instance(software_id)
        if device is None or eid is None:
            self.record("Input", verdict="no-instance", detail=detail)
            return "no-instance"
        try:
            with self.entered(device, eid) as enclave:
                detail["chain"] = enclave.process_input(data).hex()
            verdict = "accepted"
        except KeyfortError as exc:
            verdict = exc.code
        self.record("Input", src=device.name, eid=eid, verdict=verdict, device=device, detail=detail)
        return verdict

    def _running_instance(self, software_id: bytes) -> tuple[Optional[Device], Optional[int]]:
        for device in self.devices.values():
            if not device.up:
                continue
            for eid in sorted(device.sm.enclaves):
                record = device.sm.enclaves[eid]
                if record.ID == software_id and record.phase == EnclavePhase.RUNNING:
                    return device, eid
        return None, None

    def find_enclave(self, device_name: str, software_id: bytes) -> EnclaveRecord:
        device = self.device(device_name)
        for eid in sorted(device.sm.enclaves):
            record = device.sm.enclaves[eid]
            if record.live and record.ID == software_id:
                return record
        raise ScenarioError(f"no live enclave '{software_id.decode(errors='replace')}' on {device_name}")

    def device_by_pk(self, pk: bytes) -> Device:
        return next(device for device in self.devices.values() if device.pk == pk)

    def begin_operation(self, plan: OperationPlan) -> None:
        self.operation_plan = plan
        self.capture_stores()
        self._operation_puts = {name: device.store.put_count for name, device in self.devices.items()}
        self.record(
            "Operation",
            src=PARTY,
            verdict="update" if plan.is_update else "migration",
            detail={
                "id": plan.software_id.hex(),
                "source": self.name_of(plan.source_pk),
                "destination": self.name_of(plan.destination_pk),
                "eid_S": plan.eid_S,
            },
        )
        self.party.start(plan, rdtime(self.clock))
        self._drain_party()

    def run(self) -> Trace:
        return run_until_quiescent(self)

    def operation_enclaves(self) -> tuple[Optional[EnclaveRecord], Optional[EnclaveRecord]]:
        plan = self.operation_plan
        if plan is None:
            return None, None
        source = self.device_by_pk(plan.source_pk).sm.enclaves.get(plan.eid_S)
        destination = None
        if plan.eid_D is not None:
            destination = self.device_by_pk(plan.destination_pk).sm.enclaves.get(plan.eid_D)
        return source, destination

    def finish(self, inputs_after: Optional[list[str]] = None) -> None:
        """Feed the post-operation inputs and record every enclave's terminal state."""
        plan = self.operation_plan
        inputs = inputs_after if inputs_after is not None else self.scenario.operation.inputs_after
        for data in inputs:
            target = plan.software_id if plan is not None else self.scenario.operation.target.encode()
            self.deliver_input(target, data.encode())
        for device in self.devices.values():
            for eid in sorted(device.sm.enclaves):
                record = device.sm.enclaves[eid]
                enclave = device.enclaves.get(eid)
                detail = {"id": record.ID.hex(), "m": record.m.hex(), "v": record.v}
                if enclave is not None:
                    detail.update(
                        chain=enclave.chain.hex(),
                        heap=digest(enclave.heap).hex(),
                        mode=enclave.mode.value,
                        inputs=len(enclave.input_log),
                    )
                self.record("Final", src=device.name, eid=eid, verdict=record.phase.value, device=device, detail=detail)
        # store writes issued by the operation, the range a store-fault sweep covers
        for name, first in sorted(self._operation_puts.items()):
            end = self.devices[name].store.put_count
            self.record("StoreWrites", src=name, verdict=str(end - first), detail={"first": first, "end": end})

    def final_versions(self) -> dict[str, int]:
        return {
            f"{device.name}:{software_id.decode(errors='replace')}": entry.v_latest
            for device in self.devices.values()
            for software_id, entry in sorted(device.sm.sw_versions.items())
        }
