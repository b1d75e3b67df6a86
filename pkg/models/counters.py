from pydantic import Field

from models.codec import CanonicalReader, CanonicalWriter
from models.common import RecordModel, SoftwareId, Version


class MonotonicCounter(RecordModel):
    ctr_ID: int = Field(ge=1)
    ctr_val: int = Field(default=0, ge=0)
    owner: SoftwareId

    def canonical_bytes(self) -> bytes:
        return CanonicalWriter().uint(self.ctr_ID).uint(self.ctr_val).bytes_(self.owner).getvalue()

    @classmethod
    def read_from(cls, reader: CanonicalReader) -> "MonotonicCounter":
        return cls(ctr_ID=reader.uint(), ctr_val=reader.uint(), owner=reader.bytes_())


class VersionEntry(RecordModel):
    """Latest installed version of one software identifier."""

    ID: SoftwareId
    v_latest: Version

    def canonical_bytes(self) -> bytes:
        return CanonicalWriter().bytes_(self.ID).uint(self.v_latest).getvalue()

    @classmethod
    def read_from(cls, reader: CanonicalReader) -> "VersionEntry":
        return cls(ID=reader.bytes_(), v_latest=reader.uint())
