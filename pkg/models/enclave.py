from enum import Enum

from pydantic import Field, model_validator

from errors import InvalidCloneBound
from models.codec import CanonicalWriter
from models.common import EnclaveId, Measurement, RecordModel, SoftwareId, Ticks, Version


class EnclavePhase(str, Enum):
    CREATED = "Created"
    RUNNING = "Running"
    PAUSED = "Paused"
    DESTROYED = "Destroyed"


class EnclaveRecord(RecordModel):
    """Per-enclave SM metadata."""

    eid: EnclaveId
    ID: SoftwareId
    v: Version
    N: int = Field(default=1, ge=1)
    m: Measurement
    t_E: Ticks = 0
    t_E_entry: Ticks = 0
    resume_ok: bool = True
    phase: EnclavePhase = EnclavePhase.CREATED

    @model_validator(mode="after")
    def _paused_unless_resumable(self) -> "EnclaveRecord":
        if not self.resume_ok and self.phase == EnclavePhase.RUNNING:
            raise ValueError("an enclave with resume_ok=false cannot be Running")
        return self

    @property
    def live(self) -> bool:
        return self.phase != EnclavePhase.DESTROYED

    def canonical_bytes(self) -> bytes:
        return (
            CanonicalWriter()
            .uint(self.eid)
            .bytes_(self.ID)
            .uint(self.v)
            .uint(self.N)
            .bytes_(self.m)
            .uint(self.t_E)
            .uint(self.t_E_entry)
            .flag(self.resume_ok)
            .text(self.phase.value)
            .getvalue()
        )


def new_enclave_record(
    ID: bytes,
    v: int,
    m: bytes,
    eid: int,
    now: int,
    N: int = 1,
    resume_ok: bool = True,
) -> EnclaveRecord:
    """Create the metadata entry for a freshly initialized enclave.

    Args:
        ID: Software identifier shared by all versions.
        v: Version of the binary.
        m: Measurement of the binary.
        eid: Identifier assigned by the SM.
        now: Current virtual time in ticks.
        N: Allowed concurrent instances; defaults to 1.
        resume_ok: False for migration and update destinations.

    Returns:
        A record in phase Created with no accumulated runtime.

    Raises:
        InvalidCloneBound: If N is smaller than 1.
    """
    if N < 1:
        raise InvalidCloneBound(f"clone bound must be at least 1, got {N}")
    return EnclaveRecord(
        eid=eid, ID=ID, v=v, N=N, m=m, t_E=0, t_E_entry=now, resume_ok=resume_ok
    )
