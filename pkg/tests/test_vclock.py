from __future__ import annotations

from random import Random
from typing import Optional

import pytest

from errors import NestedEntry, NotEntered, ResumeDenied, UnknownEnclave
from models.enclave import EnclavePhase, EnclaveRecord, new_enclave_record
from vclock import (
    ContextSwitch,
    VirtualClock,
    advance,
    advance_to,
    enclave_local_time,
    on_context_switch,
    rdtime,
    to_ns,
)


class Table:
    def __init__(self, *records: EnclaveRecord) -> None:
        self.records = {record.eid: record for record in records}
        self.hart_eid: Optional[int] = None

    def live_record(self, eid: int) -> EnclaveRecord:
        record = self.records.get(eid)
        if record is None or not record.live:
            raise UnknownEnclave(str(eid))
        return record


def _record(eid: int = 1, *, resume_ok: bool = True) -> EnclaveRecord:
    return new_enclave_record(b"app", 1, bytes(32), eid, 0, resume_ok=resume_ok)


def _random_schedule(rng: Random) -> list[tuple[int, int]]:
    schedule, cursor = [], 0
    for _ in range(rng.randint(0, 12)):
        enter = cursor + rng.randint(0, 50)
        leave = enter + rng.randint(0, 200)
        schedule.append((enter, leave))
        cursor = leave
    return schedule


def test_clock_only_moves_forward() -> None:
    clock = VirtualClock()
    assert advance(clock, 5) == 5
    assert advance_to(clock, 9) == 9
    with pytest.raises(ValueError):
        advance_to(clock, 3)
    assert rdtime(clock) == 9
    assert to_ns(clock) == 900


def test_clock_rejects_bad_construction() -> None:
    with pytest.raises(ValueError):
        VirtualClock(ticks=-1)
    with pytest.raises(ValueError):
        VirtualClock(tick_period_ns=0)


@pytest.mark.parametrize("seed", range(200))
def test_local_time_equals_sum_of_intervals(seed: int) -> None:
    rng = Random(seed)
    clock = VirtualClock()
    table = Table(_record())
    schedule = _random_schedule(rng)
    for enter, leave in schedule:
        advance_to(clock, enter)
        on_context_switch(table, ContextSwitch.HOST_TO_ENCLAVE, 1, rdtime(clock))
        advance_to(clock, leave)
        on_context_switch(table, ContextSwitch.ENCLAVE_TO_HOST, 1, rdtime(clock))
    advance(clock, rng.randint(0, 100))
    assert enclave_local_time(table, 1, rdtime(clock)) == sum(leave - enter for enter, leave in schedule)


def test_local_time_includes_the_open_interval() -> None:
    table = Table(_record())
    on_context_switch(table, ContextSwitch.HOST_TO_ENCLAVE, 1, 10)
    assert enclave_local_time(table, 1, 35) == 25
    assert table.hart_eid == 1


def test_entry_denied_without_resume_ok() -> None:
    table = Table(_record(resume_ok=False))
    with pytest.raises(ResumeDenied):
        on_context_switch(table, ContextSwitch.HOST_TO_ENCLAVE, 1, 0)
    assert table.hart_eid is None


def test_nested_entry_is_rejected() -> None:
    table = Table(_record(1), _record(2))
    on_context_switch(table, ContextSwitch.HOST_TO_ENCLAVE, 1, 0)
    with pytest.raises(NestedEntry):
        on_context_switch(table, ContextSwitch.HOST_TO_ENCLAVE, 2, 1)


def test_exit_without_entry_is_rejected() -> None:
    table = Table(_record())
    with pytest.raises(NotEntered):
        on_context_switch(table, ContextSwitch.ENCLAVE_TO_HOST, 1, 5)


def test_destroyed_enclave_is_unknown() -> None:
    record = _record()
    record.phase = EnclavePhase.DESTROYED
    with pytest.raises(UnknownEnclave):
        on_context_switch(Table(record), ContextSwitch.HOST_TO_ENCLAVE, 1, 0)
