from __future__ import annotations

from random import Random
from typing import Optional

import pytest

from channel import Fabric, corrupt_byte, run_until_quiescent
from crypto_shim import KeyDirectory, public_key_id
from errors import StepBudgetExceeded
from models.envelope import Envelope, FaultAction, FaultPlan, FaultRule, MessageKind
from models.messages import BlobMsg, SessionMsg
from models.trace import Trace
from settings import Settings
from vclock import VirtualClock, rdtime

A = public_key_id(b"\x01" * 32)
B = public_key_id(b"\x02" * 32)
PAYLOAD = SessionMsg(ID=b"app", eid_S=1, eid_D=2).encode()


def _fabric(*rules: FaultRule, settings: Optional[Settings] = None) -> Fabric:
    directory = KeyDirectory(Random(0))
    directory.register(A, B)
    return Fabric(VirtualClock(), directory, FaultPlan(rules=list(rules)), settings or Settings())


def test_authenticated_envelopes_carry_a_verifying_tag() -> None:
    fabric = _fabric()
    env = fabric.seal(A, B, MessageKind.OK_4O, PAYLOAD)
    assert len(env.tag) == 16
    assert fabric.verify(env)
    assert not fabric.verify(corrupt_byte(env, 3))
    assert not fabric.verify(env.model_copy(update={"dst_eid": 4}))


def test_host_path_envelopes_are_not_tagged() -> None:
    fabric = _fabric()
    payload = BlobMsg(eid_S=1, eid_D=2, C=b"c" * 20, M=b"m" * 16).encode()
    env = fabric.seal(A, B, MessageKind.IMPORT_STATE, payload, dst_eid=2)
    assert env.tag == b""
    assert fabric.verify(corrupt_byte(env, 0))


def test_latency_depends_on_locality() -> None:
    settings = Settings()
    fabric = _fabric(settings=settings)
    assert fabric.seal(A, B, MessageKind.OK_4O, PAYLOAD).deliver_at == settings.hop_latency
    assert fabric.seal(A, A, MessageKind.COMMIT, PAYLOAD).deliver_at == settings.local_latency


def test_delivery_order_and_clock() -> None:
    fabric = _fabric()
    far = fabric.seal(A, B, MessageKind.OK_4O, PAYLOAD)
    near = fabric.seal(A, A, MessageKind.COMMIT, PAYLOAD)
    fabric.send(far)
    fabric.send(near)
    assert fabric.step().seq == near.seq
    assert fabric.step().seq == far.seq
    assert rdtime(fabric.clock) == far.deliver_at
    assert fabric.step() is None


def test_drop_applies_to_the_named_occurrence_only() -> None:
    fabric = _fabric(FaultRule(kind=MessageKind.OK_4O, occurrence=1, action=FaultAction.DROP))
    first = fabric.send(fabric.seal(A, B, MessageKind.OK_4O, PAYLOAD))
    second = fabric.send(fabric.seal(A, B, MessageKind.OK_4O, PAYLOAD))
    assert len(first.queued) == 1 and first.fault == ""
    assert second.queued == () and second.fault == "Drop Ok4o #1"
    assert len(fabric) == 1


def test_delay_duplicate_and_corrupt() -> None:
    settings = Settings()
    fabric = _fabric(
        FaultRule(kind=MessageKind.OK_4O, occurrence=None, action=FaultAction.DELAY),
        FaultRule(kind=MessageKind.OK_4Q, action=FaultAction.DUPLICATE),
        FaultRule(kind=MessageKind.OK_5, action=FaultAction.CORRUPT_BYTE, offset=2),
        settings=settings,
    )
    delayed = fabric.send(fabric.seal(A, B, MessageKind.OK_4O, PAYLOAD)).queued[0]
    assert delayed.deliver_at == settings.hop_latency + settings.delay_fault_ticks

    copies = fabric.send(fabric.seal(A, B, MessageKind.OK_4Q, PAYLOAD)).queued
    assert len(copies) == 2
    assert copies[0].seq != copies[1].seq
    assert all(fabric.verify(copy) for copy in copies)

    corrupted = fabric.send(fabric.seal(A, B, MessageKind.OK_5, PAYLOAD)).queued[0]
    assert corrupted.payload != PAYLOAD
    assert not fabric.verify(corrupted)


def test_corrupt_byte_falls_back_to_the_tag() -> None:
    env = Envelope(seq=0, src=A, dst=B, kind=MessageKind.ACK, tag=b"\x00" * 16, deliver_at=1)
    assert corrupt_byte(env, 5).tag == b"\x00" * 5 + b"\x01" + b"\x00" * 10


class Spinning:
    """A world whose timer always fires at the current tick and never settles."""

    def __init__(self, settings: Settings) -> None:
        self.settings = settings
        self.clock = VirtualClock()
        self.fabric = Fabric(self.clock, KeyDirectory(Random(0)), settings=settings)
        self.trace = Trace()
        self.fired = 0

    def next_timer(self) -> Optional[int]:
        return rdtime(self.clock)

    def fire_timers(self) -> None:
        self.fired += 1

    def dispatch(self, env: Envelope) -> None:
        raise AssertionError("nothing was sent")


def test_run_until_quiescent_enforces_the_step_budget() -> None:
    world = Spinning(Settings(step_budget=25))
    with pytest.raises(StepBudgetExceeded):
        run_until_quiescent(world)
    assert world.fired == 25


class Relay(Spinning):
    def __init__(self, settings: Settings) -> None:
        super().__init__(settings)
        self.fabric.directory.register(A, B)
        self.delivered: list[int] = []

    def next_timer(self) -> Optional[int]:
        return None

    def dispatch(self, env: Envelope) -> None:
        self.delivered.append(env.seq)


def test_run_until_quiescent_drains_the_fabric() -> None:
    world = Relay(Settings())
    for _ in range(3):
        world.fabric.send(world.fabric.seal(A, B, MessageKind.OK_4O, PAYLOAD))
    assert run_until_quiescent(world) is world.trace
    assert world.delivered == [0, 1, 2]
