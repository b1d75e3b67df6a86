"""Virtual machine-mode timer and per-enclave runtime accounting.

The clock stands in for the ``mtime`` register: it only moves forward and
only the scheduler advances it. Enclave-local time is charged on context
switches, one enclave per hart.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Protocol

from errors import NestedEntry, NotEntered, ResumeDenied
from models.enclave import EnclaveRecord


@dataclass
class VirtualClock:
    ticks: int = 0
    tick_period_ns: int = 100

    def __post_init__(self):
        if self.ticks < 0:
            raise ValueError("ticks must not be negative")
        if self.tick_period_ns <= 0:
            raise ValueError("tick_period_ns must be positive")


class ContextSwitch(str, Enum):
    HOST_TO_ENCLAVE = "HostToEnclave"
    ENCLAVE_TO_HOST = "EnclaveToHost"


class EnclaveTable(Protocol):
    """What the accounting needs from an SM: live lookup and the hart's current enclave."""

    hart_eid: Optional[int]

    def live_record(self, eid: int) -> EnclaveRecord: ...


def rdtime(clock: VirtualClock) -> int:
    return clock.ticks


def advance(clock: VirtualClock, delta: int) -> int:
    if delta < 0:
        raise ValueError(f"cannot move the clock backwards by {delta}")
    clock.ticks += delta
    return clock.ticks


def advance_to(clock: VirtualClock, ticks: int) -> int:
    return advance(clock, ticks - clock.ticks)


def to_ns(clock: VirtualClock, ticks: Optional[int] = None) -> int:
    return (clock.ticks if ticks is None else ticks) * clock.tick_period_ns


def on_context_switch(sm_state: EnclaveTable, direction: ContextSwitch, eid: int, now: int) -> None:
    """Charge enclave time at a context switch.

    Args:
        sm_state: The SM whose enclave table is updated.
        direction: Entry into or exit from the enclave.
        eid: The enclave being entered or left.
        now: Current mtime value.

    Raises:
        UnknownEnclave: If eid is not live.
        ResumeDenied: On entry into an enclave whose resume_ok flag is false.
        NestedEntry: On entry while another enclave holds the hart.
        NotEntered: On exit from an enclave that is not entered.
    """
    record = sm_state.live_record(eid)
    if direction == ContextSwitch.HOST_TO_ENCLAVE:
        if not record.resume_ok:
            raise ResumeDenied(f"enclave {eid} may not be resumed")
        if sm_state.hart_eid is not None:
            raise NestedEntry(f"enclave {sm_state.hart_eid} already holds the hart")
        record.t_E_entry = now
        sm_state.hart_eid = eid
        return

    if sm_state.hart_eid != eid:
        raise NotEntered(f"enclave {eid} is not entered")
    record.t_E = record.t_E + (now - record.t_E_entry)
    sm_state.hart_eid = None


def enclave_local_time(sm_state: EnclaveTable, eid: int, now: int) -> int:
    record = sm_state.live_record(eid)
    if sm_state.hart_eid != eid:
        return record.t_E
    return record.t_E + (now - record.t_E_entry)
