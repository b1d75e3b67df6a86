"""Protocol message payloads and their canonical wire encoding.

Fields are encoded in declaration order; ``bytes``, ``int``, ``bool`` and
``str`` are the only field types a payload may use.
"""

from typing import Type, TypeVar

from pydantic import BaseModel, ConfigDict, ValidationError

from errors import CodecError
from models.codec import CanonicalReader, CanonicalWriter

P = TypeVar("P", bound="Payload")


class Payload(BaseModel):
    model_config = ConfigDict(frozen=True)

    def encode(self) -> bytes:
        writer = CanonicalWriter()
        for name, field in type(self).model_fields.items():
            value = getattr(self, name)
            if field.annotation is bool:
                writer.flag(value)
            elif field.annotation is int:
                writer.uint(value)
            elif field.annotation is str:
                writer.text(value)
            else:
                writer.bytes_(value)
        return writer.getvalue()

    @classmethod
    def decode(cls: Type[P], data: bytes) -> P:
        reader = CanonicalReader(data)
        values = {}
        for name, field in cls.model_fields.items():
            if field.annotation is bool:
                values[name] = reader.flag()
            elif field.annotation is int:
                values[name] = reader.uint()
            elif field.annotation is str:
                values[name] = reader.text()
            else:
                values[name] = reader.bytes_()
        reader.finish()
        try:
            return cls(**values)
        except ValidationError as exc:
            raise CodecError(f"invalid {cls.__name__} payload") from exc


class ScheduleMigrationMsg(Payload):
    ID: bytes


class ScheduleUpdateMsg(Payload):
    ID: bytes
    v: int


class AckMsg(Payload):
    step: str
    ok: bool
    error: str = ""


class InitMsg(Payload):
    ID: bytes
    v: int
    N: int
    binary: bytes


class InitResultMsg(Payload):
    ok: bool
    eid: int = 0
    error: str = ""


class StateMigrationMsg(Payload):
    pk_S: bytes
    pk_D: bytes
    eid_S: int
    eid_D: int
    m_S: bytes
    m_D: bytes
    session_id: bytes = b""


class ExportStateMsg(Payload):
    eid_S: int
    eid_D: int


class BlobMsg(Payload):
    """StateBlob (4e) and ImportState (4h)."""

    eid_S: int
    eid_D: int
    C: bytes
    M: bytes


class ExecSwitchMsg(Payload):
    eid_S: int
    eid_D: int
    source_deadline: int = 0


class CommitMsg(Payload):
    eid: int


class SessionMsg(Payload):
    """CommitForward, Ok4o, Ok4q, Ok5 and Alarm."""

    ID: bytes
    eid_S: int
    eid_D: int


class SignalMsg(Payload):
    """SM-to-enclave signal (4p, rollback notice)."""

    eid: int


class TimeoutNoticeMsg(Payload):
    ID: bytes
    eid_S: int
    eid_D: int
    dest_inactive: bool
    reason: str = ""
