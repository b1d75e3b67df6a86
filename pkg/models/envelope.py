from enum import Enum
from typing import List, Optional

from pydantic import Field, model_validator

from models.codec import CanonicalWriter
from models.common import FrozenModel, PublicKeyId, Ticks


class MessageKind(str, Enum):
    SCHEDULE_MIGRATION = "ScheduleMigration"
    SCHEDULE_UPDATE = "ScheduleUpdate"
    ACK = "Ack"
    INIT = "Init"
    INIT_RESULT = "InitResult"
    STATE_MIGRATION = "StateMigration"
    EXPORT_STATE = "ExportState"
    STATE_BLOB = "StateBlob"
    EXEC_SWITCH = "ExecSwitch"
    IMPORT_STATE = "ImportState"
    COMMIT = "Commit"
    COMMIT_FORWARD = "CommitForward"
    OK_4O = "Ok4o"
    OK_4P = "Ok4p"
    OK_4Q = "Ok4q"
    OK_5 = "Ok5"
    TIMEOUT_NOTICE = "TimeoutNotice"
    ALARM = "Alarm"

    @property
    def authenticated(self) -> bool:
        return self not in UNAUTHENTICATED_KINDS


# Export/import requests ride the untrusted host path; the blob carries its own AEAD tag.
UNAUTHENTICATED_KINDS = frozenset(
    {MessageKind.EXPORT_STATE, MessageKind.STATE_BLOB, MessageKind.IMPORT_STATE}
)


class Envelope(FrozenModel):
    seq: int = Field(ge=0)
    src: PublicKeyId
    dst: PublicKeyId
    kind: MessageKind
    payload: bytes = b""
    tag: bytes = b""
    deliver_at: Ticks
    sent_at: Ticks = 0
    dst_eid: Optional[int] = None
    occurrence: int = Field(default=0, ge=0)

    def mac_input(self) -> bytes:
        return (
            CanonicalWriter()
            .text(self.kind.value)
            .bytes_(self.src)
            .bytes_(self.dst)
            .uint(self.dst_eid or 0)
            .bytes_(self.payload)
            .getvalue()
        )

    @property
    def local(self) -> bool:
        return self.src == self.dst


class FaultAction(str, Enum):
    DROP = "Drop"
    DELAY = "Delay"
    DUPLICATE = "Duplicate"
    CORRUPT_BYTE = "CorruptByte"


class FaultRule(FrozenModel):
    """Apply ``action`` to the ``occurrence``-th envelope of ``kind`` (every one if None)."""

    kind: MessageKind
    occurrence: Optional[int] = Field(default=0, ge=0)
    action: FaultAction
    delay: int = Field(default=0, ge=0)
    offset: int = Field(default=0, ge=0)

    def matches(self, kind: MessageKind, occurrence: int) -> bool:
        return self.kind == kind and (self.occurrence is None or self.occurrence == occurrence)

    def describe(self) -> str:
        which = "every" if self.occurrence is None else f"#{self.occurrence}"
        return f"{self.action.value} {self.kind.value} {which}"


class CrashStage(str, Enum):
    BEFORE = "before"
    AFTER = "after"
    VERSION_PERSISTED = "commit:version-persisted"
    SOURCE_DESTRUCTION_RECORDED = "commit:source-destruction-recorded"

    @property
    def internal(self) -> bool:
        return self not in (CrashStage.BEFORE, CrashStage.AFTER)


class CrashPoint(FrozenModel):
    """Crash ``component`` around its ``dispatch_index``-th dispatch, or at a named commit stage."""

    component: str
    stage: CrashStage
    dispatch_index: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _index_for_dispatch_stages(self) -> "CrashPoint":
        if not self.stage.internal and self.dispatch_index is None:
            raise ValueError("before/after crash points need a dispatch_index")
        return self

    def describe(self) -> str:
        if self.stage.internal:
            return f"crash {self.component} at {self.stage.value}"
        return f"crash {self.component} {self.stage.value} dispatch #{self.dispatch_index}"


class StoreFaultPoint(FrozenModel):
    component: str
    write_index: int = Field(ge=0)


class FaultPlan(FrozenModel):
    rules: List[FaultRule] = Field(default_factory=list)
    crashes: List[CrashPoint] = Field(default_factory=list)
    store_faults: List[StoreFaultPoint] = Field(default_factory=list)
    adversary_replay: bool = False

    @property
    def empty(self) -> bool:
        return not (self.rules or self.crashes or self.store_faults or self.adversary_replay)

    def describe(self) -> str:
        parts = [rule.describe() for rule in self.rules]
        parts += [crash.describe() for crash in self.crashes]
        parts += [f"io-fault {f.component} write #{f.write_index}" for f in self.store_faults]
        if self.adversary_replay:
            parts.append("stale store replay")
        return "; ".join(parts) or "fault-free"
