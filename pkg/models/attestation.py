from pydantic import Field

from models.codec import CanonicalReader, CanonicalWriter
from models.common import MAC_SIZE, FrozenModel, Measurement, SoftwareId, Version


class AttestationReport(FrozenModel):
    m: Measurement
    ID: SoftwareId
    v: Version
    N: int = Field(ge=1)
    sig: bytes = b""

    def signed_bytes(self) -> bytes:
        """Canonical encoding of every field the signature covers."""
        return (
            CanonicalWriter()
            .text("keyfort-attestation")
            .bytes_(self.m)
            .bytes_(self.ID)
            .uint(self.v)
            .uint(self.N)
            .getvalue()
        )

    def canonical_bytes(self) -> bytes:
        return CanonicalWriter().raw(self.signed_bytes()).bytes_(self.sig).getvalue()


class SealedBlob(FrozenModel):
    """Sealed enclave state. The freshness counter is only visible after unsealing."""

    ctr_ID: int = Field(ge=1)
    ciphertext: bytes
    tag: bytes = Field(min_length=MAC_SIZE, max_length=MAC_SIZE)

    def canonical_bytes(self) -> bytes:
        return (
            CanonicalWriter()
            .uint(self.ctr_ID)
            .bytes_(self.ciphertext)
            .bytes_(self.tag)
            .getvalue()
        )

    @classmethod
    def from_canonical(cls, data: bytes) -> "SealedBlob":
        reader = CanonicalReader(data)
        blob = cls(ctr_ID=reader.uint(), ciphertext=reader.bytes_(), tag=reader.bytes_())
        reader.finish()
        return blob
