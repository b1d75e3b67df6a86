from typing import Annotated

from pydantic import BaseModel, ConfigDict, Field

DIGEST_SIZE = 32
MAC_SIZE = 16
SESSION_ID_SIZE = 16

SoftwareId = Annotated[bytes, Field(min_length=1, max_length=32)]
Version = Annotated[int, Field(ge=0)]
Measurement = Annotated[bytes, Field(min_length=DIGEST_SIZE, max_length=DIGEST_SIZE)]
EnclaveId = Annotated[int, Field(ge=1)]
PublicKeyId = Annotated[bytes, Field(min_length=DIGEST_SIZE, max_length=DIGEST_SIZE)]
KeyMaterial = Annotated[bytes, Field(min_length=DIGEST_SIZE, max_length=DIGEST_SIZE)]
Ticks = Annotated[int, Field(ge=0)]


class FrozenModel(BaseModel):
    """Value type: immutable once built, compared field by field."""

    model_config = ConfigDict(frozen=True)


class RecordModel(BaseModel):
    """Mutable SM-owned record; assignments are re-validated."""

    model_config = ConfigDict(validate_assignment=True)
