from enum import Enum
from typing import Optional

from pydantic import Field

from models.codec import CanonicalReader, CanonicalWriter
from models.common import (
    EnclaveId,
    Measurement,
    PublicKeyId,
    RecordModel,
    SoftwareId,
    Ticks,
    Version,
)


class TargetOp(str, Enum):
    UPDATE = "Update"
    MIGRATION_SOURCE = "MigrationSource"
    MIGRATION_DESTINATION = "MigrationDestination"


class MigrationRecord(RecordModel):
    """Metadata for one active update or migration on one SM."""

    ID: SoftwareId
    target_op: TargetOp
    eid_S: EnclaveId
    eid_D: EnclaveId
    m_S: Measurement
    m_D: Measurement
    pk_S: PublicKeyId
    pk_D: PublicKeyId
    s: Optional[bytes] = Field(default=None, min_length=32, max_length=32)
    T_SM: Ticks
    v_D: Version = 0
    session_id: bytes = b""
    party_pk: bytes = b""
    commit_sent: bool = False
    source_destroyed: bool = False
    failed: bool = False

    @property
    def is_source_side(self) -> bool:
        return self.target_op in (TargetOp.UPDATE, TargetOp.MIGRATION_SOURCE)

    @property
    def is_destination_side(self) -> bool:
        return self.target_op in (TargetOp.UPDATE, TargetOp.MIGRATION_DESTINATION)

    def session_key(self) -> tuple[bytes, int, int]:
        return (self.ID, self.eid_S, self.eid_D)

    def canonical_bytes(self, include_seed: bool = True) -> bytes:
        return (
            CanonicalWriter()
            .bytes_(self.ID)
            .text(self.target_op.value)
            .uint(self.eid_S)
            .uint(self.eid_D)
            .bytes_(self.m_S)
            .bytes_(self.m_D)
            .bytes_(self.pk_S)
            .bytes_(self.pk_D)
            .optional_bytes(self.s if include_seed else None)
            .uint(self.T_SM)
            .uint(self.v_D)
            .bytes_(self.session_id)
            .bytes_(self.party_pk)
            .flag(self.commit_sent)
            .flag(self.source_destroyed)
            .flag(self.failed)
            .getvalue()
        )

    @classmethod
    def read_from(cls, reader: CanonicalReader) -> "MigrationRecord":
        return cls(
            ID=reader.bytes_(),
            target_op=TargetOp(reader.text()),
            eid_S=reader.uint(),
            eid_D=reader.uint(),
            m_S=reader.bytes_(),
            m_D=reader.bytes_(),
            pk_S=reader.bytes_(),
            pk_D=reader.bytes_(),
            s=reader.optional_bytes(),
            T_SM=reader.uint(),
            v_D=reader.uint(),
            session_id=reader.bytes_(),
            party_pk=reader.bytes_(),
            commit_sent=reader.flag(),
            source_destroyed=reader.flag(),
            failed=reader.flag(),
        )

    @classmethod
    def from_canonical(cls, data: bytes) -> "MigrationRecord":
        reader = CanonicalReader(data)
        record = cls.read_from(reader)
        reader.finish()
        return record
