from __future__ import annotations

from random import Random
from typing import Any, Optional

import pytest

from crypto_shim import measure, public_key_id
from enclave_sim import replay_chain
from harness import execute
from models.enclave import EnclavePhase
from models.envelope import Envelope, MessageKind
from models.messages import AckMsg, InitResultMsg, Payload
from models.outcome import OutcomeKind
from orchestrator import OperationPlan, Party, PartyPhase, run_migration, run_update
from settings import Settings
from tests.conftest import make_scenario
from world import World

SM = public_key_id(b"\x05" * 32)
OTHER = public_key_id(b"\x06" * 32)


class PartyProbe:
    def __init__(self) -> None:
        self.sent: list[tuple[bytes, MessageKind, Payload, Optional[int]]] = []
        self.records: list[tuple[str, dict[str, Any]]] = []
        self.party = Party(b"\x07" * 32, self._send, self._record, Settings())

    def _send(self, dst: bytes, kind: MessageKind, payload: Payload, dst_eid: Optional[int]) -> None:
        self.sent.append((dst, kind, payload, dst_eid))

    def _record(self, kind: str, **fields: Any) -> None:
        self.records.append((kind, fields))

    def deliver(self, src: bytes, kind: MessageKind, payload: Payload) -> bool:
        env = Envelope(seq=0, src=src, dst=self.party.pk, kind=kind, payload=payload.encode(), deliver_at=0)
        return self.party.handle(env)


def _update_plan() -> OperationPlan:
    return OperationPlan(
        software_id=b"app",
        version=2,
        binary=b"app-v2",
        source_pk=SM,
        destination_pk=SM,
        eid_S=1,
        m_S=measure(b"app-v1"),
    )


def _world(scenario) -> World:
    world = World(scenario, settings=Settings())
    world.install()
    return world


def test_party_walks_the_update_steps() -> None:
    probe = PartyProbe()
    probe.party.start(_update_plan(), now=0)
    assert probe.sent[-1][1] == MessageKind.SCHEDULE_UPDATE
    assert probe.party.next_deadline() == Settings().timeout_party

    assert not probe.deliver(SM, MessageKind.ACK, AckMsg(step="4", ok=True))
    assert probe.deliver(SM, MessageKind.ACK, AckMsg(step="1", ok=True))
    assert probe.sent[-1][1] == MessageKind.INIT

    assert not probe.deliver(OTHER, MessageKind.INIT_RESULT, InitResultMsg(ok=True, eid=2))
    assert probe.deliver(SM, MessageKind.INIT_RESULT, InitResultMsg(ok=True, eid=2))
    assert probe.party.phase == PartyPhase.REGISTERING
    assert [sent[1] for sent in probe.sent].count(MessageKind.STATE_MIGRATION) == 1

    assert probe.deliver(SM, MessageKind.ACK, AckMsg(step="4", ok=True))
    assert probe.party.phase == PartyPhase.EXPORTING
    dst, kind, _, dst_eid = probe.sent[-1]
    assert (dst, kind, dst_eid) == (SM, MessageKind.EXPORT_STATE, 1)


def test_party_failure_during_init_is_classified_as_init() -> None:
    probe = PartyProbe()
    probe.party.start(_update_plan(), now=0)
    probe.deliver(SM, MessageKind.ACK, AckMsg(step="1", ok=False, error="NoEligibleEnclave"))
    assert probe.party.phase == PartyPhase.FAILED
    assert probe.records == [("PartyFailure", {"verdict": "NoEligibleEnclave", "phase": "init", "at": "Scheduling"})]
    assert not probe.deliver(SM, MessageKind.ACK, AckMsg(step="1", ok=True))
    assert probe.party.next_deadline() is None


def test_party_times_out() -> None:
    probe = PartyProbe()
    probe.party.start(_update_plan(), now=0)
    probe.party.on_timer(Settings().timeout_party - 1)
    assert probe.party.phase == PartyPhase.SCHEDULING
    probe.party.on_timer(Settings().timeout_party)
    assert probe.records[-1][1]["verdict"] == "timeout"


def test_happy_update_commits() -> None:
    world = _world(make_scenario(state_size=128, inputs_before=["deposit 10"]))
    outcome = run_update(world, "sm0", b"app", 2, b"app-v2")
    assert outcome.kind == OutcomeKind.COMMITTED
    assert outcome.final_versions == {"sm0:app": 2}
    assert outcome.trace_ref == world.trace.digest()

    source, destination = world.operation_enclaves()
    assert source.phase == EnclavePhase.DESTROYED
    assert destination.phase == EnclavePhase.RUNNING
    assert destination.v == 2
    moved = world.devices["sm0"].enclaves[destination.eid]
    assert moved.chain == replay_chain([b"deposit 10"])
    assert moved.heap == world.devices["sm0"].enclaves[source.eid].heap
    assert world.party.phase == PartyPhase.DONE


def test_happy_migration_commits() -> None:
    world = _world(make_scenario(kind="migration", devices=("sm0", "sm1"), state_size=32, inputs_before=["x"]))
    outcome = run_migration(world, "sm0", "sm1", b"app", 1, b"app-v1")
    assert outcome.kind == OutcomeKind.COMMITTED
    assert outcome.final_versions == {"sm0:app": 1, "sm1:app": 1}

    source, destination = world.operation_enclaves()
    assert source.phase == EnclavePhase.DESTROYED
    assert destination.phase == EnclavePhase.RUNNING
    assert world.devices["sm1"].enclaves[destination.eid].chain == replay_chain([b"x"])
    assert not world.devices["sm0"].sm.migrations
    assert not world.devices["sm1"].sm.migrations


def test_update_to_the_same_version_is_rejected_at_init() -> None:
    world = _world(make_scenario(version=1, binary="app-v1b"))
    outcome = run_update(world, "sm0", b"app", 1, b"app-v1b")
    assert outcome.kind == OutcomeKind.REJECTED_AT_INIT
    assert [event.verdict for event in world.trace.of_kind("PartyFailure")] == ["NoEligibleEnclave"]


def test_dropped_import_aborts_with_source_active() -> None:
    scenario = make_scenario(
        inputs_before=["deposit 10"],
        inputs_after=["deposit 1"],
        faults={"rules": [{"kind": "ImportState", "action": "Drop"}]},
    )
    result = execute(scenario, settings=Settings())
    assert result.outcome.kind == OutcomeKind.ABORTED_SOURCE_ACTIVE
    assert result.violations == []
    assert result.outcome.final_versions == {"sm0:app": 1}


def test_losing_every_commit_acknowledgement_raises_the_alarm() -> None:
    scenario = make_scenario(
        kind="migration",
        devices=("sm0", "sm1"),
        faults={"rules": [{"kind": "Ok4o", "occurrence": None, "action": "Drop"}]},
    )
    result = execute(scenario, settings=Settings())
    assert result.outcome.kind == OutcomeKind.ALARM_NEITHER_ACTIVE
    assert len(result.trace.of_kind("Ok4o")) == 1 + Settings().resend_limit
    assert [event.verdict for event in result.trace.of_kind("Alarm") if "io" not in event.detail] == ["raised"]


@pytest.mark.parametrize("seed", range(50))
def test_randomized_happy_updates(seed: int) -> None:
    rng = Random(seed)
    scenario = make_scenario(
        seed=seed,
        state_size=rng.randint(0, 64 * 1024),
        inputs_before=[f"in-{i}" for i in range(rng.randint(0, 5))],
        inputs_after=["after"],
    )
    result = execute(scenario, settings=Settings())
    assert result.outcome.kind == OutcomeKind.COMMITTED
    assert result.violations == []


@pytest.mark.parametrize("write_index", [5, 6])
def test_store_fault_after_the_version_commit_rolls_the_update_forward(write_index: int) -> None:
    scenario = make_scenario(
        inputs_after=["deposit 1"],
        faults={"store_faults": [{"component": "sm0", "write_index": write_index}]},
    )
    result = execute(scenario, settings=Settings())
    assert result.outcome.kind == OutcomeKind.COMMITTED
    assert result.violations == []
    assert result.outcome.final_versions == {"sm0:app": 2}
    assert result.trace.of_kind("Expire") == []


def test_store_fault_before_the_version_commit_rolls_the_update_back() -> None:
    scenario = make_scenario(faults={"store_faults": [{"component": "sm0", "write_index": 4}]})
    result = execute(scenario, settings=Settings())
    assert result.outcome.kind == OutcomeKind.ABORTED_SOURCE_ACTIVE
    assert result.violations == []
    assert [event.verdict for event in result.trace.of_kind("Expire")] == ["sm-failure"]


def test_store_fault_while_recording_source_destruction_resumes_the_source() -> None:
    scenario = make_scenario(
        kind="migration",
        devices=("sm0", "sm1"),
        inputs_after=["deposit 1"],
        faults={"store_faults": [{"component": "sm0", "write_index": 2}]},
    )
    result = execute(scenario, settings=Settings())
    assert result.outcome.kind == OutcomeKind.ABORTED_SOURCE_ACTIVE
    assert result.violations == []
    delivered = [event for event in result.trace.of_kind("CommitForward") if event.detail.get("io") == "deliver"]
    assert [event.verdict for event in delivered] == ["StoreFault"]


@pytest.mark.parametrize("write_index", [4, 5, 6])
def test_store_fault_after_the_commit_acknowledgement_still_commits(write_index: int) -> None:
    scenario = make_scenario(
        kind="migration",
        devices=("sm0", "sm1"),
        faults={"store_faults": [{"component": "sm1", "write_index": write_index}]},
    )
    result = execute(scenario, settings=Settings())
    assert result.outcome.kind == OutcomeKind.COMMITTED
    assert result.violations == []
    assert result.trace.of_kind("Expire") == []
    assert result.trace.of_kind("Alarm") == []


@pytest.mark.parametrize("seed", range(30))
def test_randomized_happy_migrations(seed: int) -> None:
    rng = Random(seed)
    inputs = [f"in-{i}" for i in range(rng.randint(0, 8))]
    split = rng.randint(0, len(inputs))
    during = sorted(rng.sample(range(1, 400), rng.randint(0, 3)))
    scenario = make_scenario(
        kind="migration",
        devices=("sm0", "sm1"),
        seed=seed,
        state_size=rng.randint(0, 16 * 1024),
        inputs_before=inputs[:split],
        inputs_during=[{"at": at, "data": f"during-{at}"} for at in during],
        inputs_after=inputs[split:],
    )
    result = execute(scenario, settings=Settings())
    assert result.outcome.kind == OutcomeKind.COMMITTED
    assert result.violations == []
