"""Deterministic message fabric with fault injection.

Envelopes are delivered in (deliver_at, seq) order. Every authenticated
envelope carries a MAC under the pair key of its endpoints; fault rules are
applied once, when the envelope is enqueued.
"""

import heapq
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

from crypto_shim import KeyDirectory, mac_sign, mac_verify
from errors import StepBudgetExceeded
from models.envelope import Envelope, FaultAction, FaultPlan, MessageKind
from models.trace import Trace
from settings import Settings
from vclock import VirtualClock, advance_to, rdtime

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SendResult:
    """What happened to one send: the copies that were queued and the fault applied."""

    queued: tuple[Envelope, ...]
    fault: str = ""


class Fabric:
    def __init__(
        self,
        clock: VirtualClock,
        directory: KeyDirectory,
        plan: Optional[FaultPlan] = None,
        settings: Optional[Settings] = None,
    ) -> None:
        self.clock = clock
        self.directory = directory
        self.plan = plan or FaultPlan()
        self.settings = settings or Settings()
        self._queue: list[tuple[int, int, Envelope]] = []
        self._seq = 0
        self._occurrences: Counter[MessageKind] = Counter()

    def __len__(self) -> int:
        return len(self._queue)

    def _next_seq(self) -> int:
        seq = self._seq
        self._seq += 1
        return seq

    def _enqueue(self, env: Envelope) -> None:
        heapq.heappush(self._queue, (env.deliver_at, env.seq, env))

    def seal(
        self,
        src: bytes,
        dst: bytes,
        kind: MessageKind,
        payload: bytes,
        dst_eid: Optional[int] = None,
    ) -> Envelope:
        """Build the envelope for one send, tagged and timed but not yet queued."""
        now = rdtime(self.clock)
        latency = self.settings.local_latency if src == dst else self.settings.hop_latency
        occurrence = self._occurrences[kind]
        self._occurrences[kind] += 1
        env = Envelope(
            seq=self._next_seq(),
            src=src,
            dst=dst,
            kind=kind,
            payload=payload,
            deliver_at=now + latency,
            sent_at=now,
            dst_eid=dst_eid,
            occurrence=occurrence,
        )
        if kind.authenticated:
            env = env.model_copy(update={"tag": mac_sign(self.directory.mac_key(src, dst), env.mac_input())})
        return env

    def send(self, env: Envelope) -> SendResult:
        """Apply the first matching fault rule and queue what survives."""
        rule = next((r for r in self.plan.rules if r.matches(env.kind, env.occurrence)), None)
        if rule is None:
            self._enqueue(env)
            return SendResult((env,))

        logger.debug("fault applied", extra={"kind": env.kind.value, "fault": rule.describe()})
        if rule.action == FaultAction.DROP:
            return SendResult((), rule.describe())
        if rule.action == FaultAction.DELAY:
            delayed = env.model_copy(
                update={"deliver_at": env.deliver_at + (rule.delay or self.settings.delay_fault_ticks)}
            )
            self._enqueue(delayed)
            return SendResult((delayed,), rule.describe())
        if rule.action == FaultAction.DUPLICATE:
            copy = env.model_copy(update={"seq": self._next_seq(), "deliver_at": env.deliver_at + 1})
            self._enqueue(env)
            self._enqueue(copy)
            return SendResult((env, copy), rule.describe())

        corrupted = corrupt_byte(env, rule.offset)
        self._enqueue(corrupted)
        return SendResult((corrupted,), rule.describe())

    def verify(self, env: Envelope) -> bool:
        if not env.kind.authenticated:
            return True
        return mac_verify(self.directory.mac_key(env.src, env.dst), env.mac_input(), env.tag)

    def next_delivery(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    def step(self) -> Optional[Envelope]:
        if not self._queue:
            return None
        deliver_at, _, env = heapq.heappop(self._queue)
        if deliver_at > rdtime(self.clock):
            advance_to(self.clock, deliver_at)
        return env


def corrupt_byte(env: Envelope, offset: int) -> Envelope:
    """Flip the low bit of one payload byte, or of the tag when the payload is empty."""
    field = "payload" if env.payload else "tag"
    data = bytearray(getattr(env, field))
    if not data:
        return env
    data[offset % len(data)] ^= 0x01
    return env.model_copy(update={field: bytes(data)})


class Quiescable(Protocol):
    fabric: Fabric
    clock: VirtualClock
    settings: Settings
    trace: Trace

    def next_timer(self) -> Optional[int]: ...

    def fire_timers(self) -> None: ...

    def dispatch(self, env: Envelope) -> None: ...


def run_until_quiescent(world: Quiescable, on_step: Optional[Callable[[], None]] = None) -> Trace:
    """Deliver envelopes and fire timers until nothing is pending.

    A timer fires ahead of the next envelope only when it is strictly earlier.

    Raises:
        StepBudgetExceeded: If the world does not settle within the step budget.
    """
    steps = 0
    while True:
        timer = world.next_timer()
        message_at = world.fabric.next_delivery()
        if timer is None and message_at is None:
            return world.trace
        steps += 1
        if steps > world.settings.step_budget:
            raise StepBudgetExceeded(f"no quiescence after {world.settings.step_budget} steps")
        if timer is not None and (message_at is None or timer < message_at):
            if timer > rdtime(world.clock):
                advance_to(world.clock, timer)
            world.fire_timers()
        else:
            world.dispatch(world.fabric.step())
        if on_step is not None:
            on_step()
