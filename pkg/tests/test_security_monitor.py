from __future__ import annotations

from random import Random

import pytest

from crypto_shim import attest_verify, measure, public_key_id
from enclave_sim import SimEnclave
from errors import (
    AlreadyMigrating,
    AlreadyScheduled,
    CloneLimitExceeded,
    EnclaveExists,
    InvalidCloneBound,
    MeasurementBlacklisted,
    MeasurementMismatch,
    NoActiveMigration,
    NoEligibleEnclave,
    NotDestination,
    NotMyKey,
    OwnerMismatch,
    ResumeDenied,
    RollbackDetected,
    StoreFault,
    TooManyInstances,
    Unauthorized,
    UnknownCounter,
    VersionMismatch,
    VersionOrderViolation,
)
from models.attestation import SealedBlob
from models.enclave import EnclavePhase
from models.envelope import MessageKind
from models.migration import TargetOp
from security_monitor import Origin
from settings import Settings
from tests.conftest import MonitorBench
from vclock import ContextSwitch, advance

STRANGER = public_key_id(b"\x09" * 32)
OTHER_SM = public_key_id(b"\x0a" * 32)


def _start_update(bench: MonitorBench) -> tuple[int, int]:
    """Install v1, schedule v2, init the destination and open the update record."""
    sm = bench.sm
    eid_S = sm.init(b"app", 1, b"app-v1")
    sm.run(eid_S)
    sm.schedule_update(bench.party_pk, b"app", 2)
    eid_D = sm.init(b"app", 2, b"app-v2")
    sm.state_migration(
        bench.party_pk, sm.device_pk, sm.device_pk, eid_S, eid_D, measure(b"app-v1"), measure(b"app-v2")
    )
    return eid_S, eid_D


# -- lifecycle -----------------------------------------------------------


@pytest.mark.parametrize("bound", [1, 2, 5])
def test_clone_bound_allows_exactly_n_instances(bench: MonitorBench, bound: int) -> None:
    for _ in range(bound):
        bench.sm.init(b"app", 1, b"app-v1", clone_bound=bound)
    with pytest.raises(CloneLimitExceeded):
        bench.sm.init(b"app", 1, b"app-v1", clone_bound=bound)
    assert len(bench.sm.live_with(lambda record: record.ID == b"app")) == bound


def test_destroyed_instance_frees_a_clone_slot(bench: MonitorBench) -> None:
    eid = bench.sm.init(b"app", 1, b"app-v1")
    bench.sm.destroy(eid)
    assert bench.sm.init(b"app", 1, b"app-v1") == eid + 1


def test_init_rejects_other_versions(bench: MonitorBench) -> None:
    bench.sm.init(b"app", 1, b"app-v1")
    for version in (0, 2):
        with pytest.raises(VersionMismatch):
            bench.sm.init(b"app", version, b"app-other")
    rejected = [event for event in bench.events if event[0] == "Init" and event[2] == "VersionMismatch"]
    assert len(rejected) == 2


def test_init_validates_bound_and_blacklist(bench: MonitorBench) -> None:
    with pytest.raises(InvalidCloneBound):
        bench.sm.init(b"app", 1, b"app-v1", clone_bound=0)
    bench.sm.blacklist.add(measure(b"app-v1"))
    with pytest.raises(MeasurementBlacklisted):
        bench.sm.init(b"app", 1, b"app-v1")


def test_first_init_records_the_version(bench: MonitorBench) -> None:
    bench.sm.init(b"app", 4, b"app-v4")
    assert bench.sm.sw_versions[b"app"].v_latest == 4


def test_attestation_report_verifies_under_device_key(bench: MonitorBench) -> None:
    eid = bench.sm.init(b"app", 1, b"app-v1", clone_bound=2)
    report = bench.sm.attest(eid)
    assert (report.ID, report.v, report.N, report.m) == (b"app", 1, 2, measure(b"app-v1"))
    attest_verify(bench.sm.device_pk, report)


def test_enclave_time_runs_only_while_entered(bench: MonitorBench) -> None:
    eid = bench.sm.init(b"app", 1, b"app-v1")
    advance(bench.clock, 100)
    bench.sm.context_switch(ContextSwitch.HOST_TO_ENCLAVE, eid)
    advance(bench.clock, 40)
    bench.sm.context_switch(ContextSwitch.ENCLAVE_TO_HOST, eid)
    advance(bench.clock, 100)
    assert bench.sm.enclave_local_time(eid) == 40


# -- authorization -------------------------------------------------------


def test_unauthorized_calls_leave_state_untouched(bench: MonitorBench) -> None:
    sm = bench.sm
    eid_S = sm.init(b"app", 1, b"app-v1")
    before = sm.state_digest()
    calls = [
        lambda: sm.schedule_migration(STRANGER, b"other"),
        lambda: sm.schedule_update(STRANGER, b"app", 2),
        lambda: sm.state_migration(STRANGER, sm.device_pk, OTHER_SM, eid_S, 1, measure(b"app-v1"), measure(b"app-v1")),
        lambda: sm.state_migration(STRANGER, sm.device_pk, sm.device_pk, eid_S, eid_S, measure(b"app-v1"), measure(b"app-v1")),
    ]
    for call in calls:
        with pytest.raises(Unauthorized):
            call()
        assert sm.state_digest() == before


def test_unauthorized_execution_switch(bench: MonitorBench) -> None:
    eid_S, eid_D = _start_update(bench)
    before = bench.sm.state_digest()
    with pytest.raises(Unauthorized):
        bench.sm.execution_switch(Origin.PARTY, eid_S, eid_D, caller_pk=STRANGER)
    assert bench.sm.state_digest() == before


# -- scheduling ----------------------------------------------------------


def test_schedule_migration_rules(bench: MonitorBench) -> None:
    sm = bench.sm
    sm.schedule_migration(bench.party_pk, b"incoming")
    with pytest.raises(AlreadyScheduled):
        sm.schedule_migration(bench.party_pk, b"incoming")
    sm.init(b"app", 1, b"app-v1")
    with pytest.raises(EnclaveExists):
        sm.schedule_migration(bench.party_pk, b"app")


def test_schedule_update_rules(bench: MonitorBench) -> None:
    sm = bench.sm
    with pytest.raises(NoEligibleEnclave):
        sm.schedule_update(bench.party_pk, b"app", 2)
    sm.init(b"app", 1, b"app-v1", clone_bound=2)
    with pytest.raises(NoEligibleEnclave):
        sm.schedule_update(bench.party_pk, b"app", 1)
    sm.init(b"app", 1, b"app-v1", clone_bound=2)
    with pytest.raises(TooManyInstances):
        sm.schedule_update(bench.party_pk, b"app", 2)


def test_scheduled_destination_starts_without_resume(bench: MonitorBench) -> None:
    sm = bench.sm
    sm.init(b"app", 1, b"app-v1")
    sm.schedule_update(bench.party_pk, b"app", 2)
    eid_D = sm.init(b"app", 2, b"app-v2")
    assert sm.enclaves[eid_D].resume_ok is False
    assert sm.scheduled_migrations == []
    with pytest.raises(ResumeDenied):
        sm.run(eid_D)


def test_scheduled_destination_still_refuses_older_versions(bench: MonitorBench) -> None:
    sm = bench.sm
    sm.init(b"app", 3, b"app-v3")
    sm.schedule_update(bench.party_pk, b"app", 4)
    with pytest.raises(VersionMismatch):
        sm.init(b"app", 2, b"app-v2")


# -- state migration -----------------------------------------------------


def test_state_migration_checks(bench: MonitorBench) -> None:
    sm = bench.sm
    eid = sm.init(b"app", 1, b"app-v1")
    m = measure(b"app-v1")
    with pytest.raises(NotMyKey):
        sm.state_migration(bench.party_pk, OTHER_SM, OTHER_SM, eid, eid, m, m)
    with pytest.raises(NotMyKey):
        sm.state_migration(bench.party_pk, OTHER_SM, STRANGER, eid, eid, m, m)
    with pytest.raises(MeasurementMismatch):
        sm.state_migration(bench.party_pk, sm.device_pk, OTHER_SM, eid, 1, m, measure(b"app-v2"))
    with pytest.raises(VersionOrderViolation):
        sm.state_migration(bench.party_pk, sm.device_pk, sm.device_pk, eid, eid, m, m)

    record = sm.state_migration(bench.party_pk, sm.device_pk, OTHER_SM, eid, 1, m, m)
    assert record.target_op == TargetOp.MIGRATION_SOURCE
    assert record.T_SM == sm.settings.timeout_sm
    with pytest.raises(AlreadyMigrating):
        sm.state_migration(bench.party_pk, sm.device_pk, OTHER_SM, eid, 1, m, m)


def test_update_commit_at_sbi_level(bench: MonitorBench) -> None:
    sm = bench.sm
    eid_S, eid_D = _start_update(bench)
    with pytest.raises(NoActiveMigration):
        sm.execution_switch(Origin.REMOTE_SM, eid_S, eid_D)
    with pytest.raises(NoActiveMigration):
        sm.migration_commit(eid_D)

    sm.execution_switch(Origin.PARTY, eid_S, eid_D, caller_pk=bench.party_pk)
    assert sm.enclaves[eid_S].phase == EnclavePhase.PAUSED
    assert sm.enclaves[eid_S].resume_ok is False
    assert sm.enclaves[eid_D].resume_ok is True
    with pytest.raises(NotDestination):
        sm.migration_commit(eid_S)

    sm.migration_commit(eid_D)
    assert sm.sw_versions[b"app"].v_latest == 2
    assert sm.enclaves[eid_S].phase == EnclavePhase.DESTROYED
    assert sm.migrations == {}
    assert [out.kind for out in sm.outbox] == [MessageKind.OK_4P, MessageKind.OK_5]
    assert sm.outbox[1].dst == bench.party_pk


def test_failed_version_write_rolls_back_and_blacklists(bench: MonitorBench) -> None:
    sm = bench.sm
    eid_S, eid_D = _start_update(bench)
    sm.execution_switch(Origin.PARTY, eid_S, eid_D, caller_pk=bench.party_pk)
    bench.store.arm_io_fault()
    with pytest.raises(StoreFault):
        sm.migration_commit(eid_D)
    assert sm.enclaves[eid_D].phase == EnclavePhase.DESTROYED
    assert sm.enclaves[eid_S].resume_ok is True
    assert sm.migrations == {}

    sm.crash()
    assert sm.blacklist == set()
    sm.recover()
    assert sm.blacklist == {measure(b"app-v2")}
    with pytest.raises(MeasurementBlacklisted):
        sm.init(b"app", 2, b"app-v2")


def test_failed_write_after_the_version_commit_is_retried(bench: MonitorBench) -> None:
    sm = bench.sm
    eid_S, eid_D = _start_update(bench)
    sm.execution_switch(Origin.PARTY, eid_S, eid_D, caller_pk=bench.party_pk)
    bench.store.arm_io_fault(bench.store.put_count + 1)
    sm.migration_commit(eid_D)
    assert sm.sw_versions[b"app"].v_latest == 2
    assert sm.enclaves[eid_S].phase == EnclavePhase.DESTROYED
    assert sm.enclaves[eid_D].live
    assert sm.blacklist == set()
    assert [out.kind for out in sm.outbox] == [MessageKind.OK_4P, MessageKind.OK_5]


def test_committed_update_never_expires_when_retries_run_out() -> None:
    bench = MonitorBench(settings=Settings(store_retries=0))
    sm = bench.sm
    eid_S, eid_D = _start_update(bench)
    sm.execution_switch(Origin.PARTY, eid_S, eid_D, caller_pk=bench.party_pk)
    bench.store.arm_io_fault(bench.store.put_count + 1)
    with pytest.raises(StoreFault):
        sm.migration_commit(eid_D)
    assert sm.enclaves[eid_D].live
    assert sm.next_deadline() is None

    sm.crash()
    sm.recover()
    assert sm.sw_versions[b"app"].v_latest == 2
    assert sm.enclaves[eid_S].phase == EnclavePhase.DESTROYED
    assert sm.enclaves[eid_D].live
    assert sm.migrations == {}


def test_update_transport_key_is_shared_and_stable(bench: MonitorBench) -> None:
    eid_S, eid_D = _start_update(bench)
    k = bench.sm.get_transport_key(eid_S)
    assert bench.sm.get_transport_key(eid_D) == k
    assert bench.sm.get_transport_key(eid_S) == k


def test_update_expires_at_its_deadline(bench: MonitorBench) -> None:
    sm = bench.sm
    eid_S, eid_D = _start_update(bench)
    sm.execution_switch(Origin.PARTY, eid_S, eid_D, caller_pk=bench.party_pk)
    deadline = sm.next_deadline()
    assert deadline == sm.settings.timeout_sm
    advance(bench.clock, deadline)
    sm.sm_timeout_tick()
    assert sm.enclaves[eid_D].phase == EnclavePhase.DESTROYED
    assert sm.enclaves[eid_S].resume_ok is True
    assert sm.migrations == {}
    assert sm.next_deadline() is None


def test_recovery_rolls_back_an_uncommitted_update(bench: MonitorBench) -> None:
    sm = bench.sm
    eid_S, eid_D = _start_update(bench)
    sm.execution_switch(Origin.PARTY, eid_S, eid_D, caller_pk=bench.party_pk)
    sm.crash()
    assert sm.down
    sm.recover()
    assert sm.enclaves[eid_D].phase == EnclavePhase.DESTROYED
    assert sm.enclaves[eid_S].resume_ok is True
    assert sm.sw_versions[b"app"].v_latest == 1


def test_recovery_refuses_a_stale_store(bench: MonitorBench) -> None:
    sm = bench.sm
    eid = sm.init(b"app", 1, b"app-v1")
    ctr = sm.allocate_mc(eid)
    image = bench.store.media.capture()
    sm.inc_mc(eid, ctr)
    sm.crash()
    bench.store.media.present(image)
    with pytest.raises(RollbackDetected):
        sm.recover()
    assert sm.halted
    assert sm.next_deadline() is None


# -- monotonic counters --------------------------------------------------


def test_counter_ownership(bench: MonitorBench) -> None:
    sm = bench.sm
    owner = sm.init(b"app", 1, b"app-v1")
    other = sm.init(b"other", 1, b"other-v1")
    ctr = sm.allocate_mc(owner)
    assert sm.inc_mc(owner, ctr) == 1
    with pytest.raises(OwnerMismatch):
        sm.inc_mc(other, ctr)
    with pytest.raises(OwnerMismatch):
        sm.get_mc_value(other, ctr)
    with pytest.raises(UnknownCounter):
        sm.get_mc_value(owner, ctr + 1)
    sm.free_mc(owner, ctr)
    with pytest.raises(UnknownCounter):
        sm.get_mc_value(owner, ctr)


def test_counter_ids_are_never_reused(bench: MonitorBench) -> None:
    sm = bench.sm
    eid = sm.init(b"app", 1, b"app-v1")
    first = sm.allocate_mc(eid)
    sm.free_mc(eid, first)
    sm.crash()
    sm.recover()
    assert sm.allocate_mc(eid) > first


def _run_counter_sequence(seed: int, steps: int = 40) -> None:
    rng = Random(seed)
    bench = MonitorBench(seed=seed)
    sm = bench.sm
    eid = sm.init(b"app", 1, b"app-v1")
    other = sm.init(b"other", 1, b"other-v1")
    enclave = SimEnclave(eid, b"app", heap=seed.to_bytes(4, "big"))
    expected: dict[int, int] = {}
    latest: dict[int, SealedBlob] = {}
    stale: dict[int, SealedBlob] = {}
    for _ in range(steps):
        op = rng.choice(["allocate", "inc", "seal", "seal", "free", "crash"])
        if op == "allocate" or not expected:
            ctr = sm.allocate_mc(eid)
            assert ctr not in expected
            expected[ctr] = 0
        elif op == "inc":
            ctr = rng.choice(sorted(expected))
            expected[ctr] += 1
            assert sm.inc_mc(eid, ctr) == expected[ctr]
            if ctr in latest:
                stale[ctr] = latest.pop(ctr)
        elif op == "seal":
            ctr = rng.choice(sorted(expected))
            if ctr in latest:
                stale[ctr] = latest[ctr]
            latest[ctr] = enclave.seal_state(sm, ctr)
            expected[ctr] += 1
        elif op == "free":
            ctr = rng.choice(sorted(expected))
            sm.free_mc(eid, ctr)
            del expected[ctr]
            latest.pop(ctr, None)
            stale.pop(ctr, None)
        else:
            sm.crash()
            sm.recover()

        assert {ctr: sm.get_mc_value(eid, ctr) for ctr in expected} == expected
        for ctr in expected:
            with pytest.raises(OwnerMismatch):
                sm.inc_mc(other, ctr)
            with pytest.raises(OwnerMismatch):
                sm.get_mc_value(other, ctr)
        for ctr, blob in stale.items():
            with pytest.raises(RollbackDetected):
                enclave.unseal_state(sm, blob)
        for blob in latest.values():
            assert enclave.unseal_state(sm, blob) == enclave.state


@pytest.mark.parametrize("seed", range(20))
def test_random_counter_operations_survive_crashes(seed: int) -> None:
    _run_counter_sequence(seed)


@pytest.mark.slow
def test_thousand_random_counter_sequences() -> None:
    for seed in range(1_000):
        _run_counter_sequence(seed)
