"""Minimal enclave application: a provisioned heap plus a digest chain over its inputs.

The chain makes state equality a proxy for input-history equality, so two
enclaves agree on ``chain`` iff they processed the same inputs in order.
"""

import logging
from enum import Enum
from typing import Protocol

from crypto_shim import aead_open, aead_seal, digest, transport_aad
from errors import AuthFailure, CodecError, HaltedDuringMigration, NoActiveMigration, RollbackDetected
from models.attestation import SealedBlob
from models.codec import CanonicalReader, CanonicalWriter

logger = logging.getLogger(__name__)


class EnclaveMode(str, Enum):
    NORMAL = "Normal"
    EXPORTED_HALTED = "ExportedHalted"
    IMPORTED_WAITING = "ImportedWaiting"
    AWAITING_IMPORT = "AwaitingImport"


class SealingMonitor(Protocol):
    """The SBI calls sealing needs."""

    def get_sealing_key(self, caller_eid: int) -> bytes: ...

    def inc_mc(self, caller_eid: int, ctr_ID: int) -> int: ...

    def get_mc_value(self, caller_eid: int, ctr_ID: int) -> int: ...


def chain_step(chain: bytes, data: bytes) -> bytes:
    return digest(chain, len(data).to_bytes(8, "big"), data)


def replay_chain(inputs: list[bytes], chain: bytes = b"") -> bytes:
    for data in inputs:
        chain = chain_step(chain, data)
    return chain


def _seal_aad(software_id: bytes, ctr_ID: int) -> bytes:
    return CanonicalWriter().text("keyfort-seal").bytes_(software_id).uint(ctr_ID).getvalue()


class SimEnclave:
    def __init__(
        self,
        eid: int,
        software_id: bytes,
        heap: bytes = b"",
        mode: EnclaveMode = EnclaveMode.NORMAL,
    ) -> None:
        self.eid = eid
        self.ID = software_id
        self.heap = heap
        self.chain = b""
        self.input_log: list[bytes] = []
        self.mode = mode

    @property
    def state(self) -> bytes:
        """D: the canonical encoding of heap and chain."""
        return CanonicalWriter().bytes_(self.heap).bytes_(self.chain).getvalue()

    def state_digest(self) -> str:
        return digest(self.state).hex()

    def _load(self, state: bytes) -> None:
        reader = CanonicalReader(state)
        heap, chain = reader.bytes_(), reader.bytes_()
        reader.finish()
        self.heap, self.chain = heap, chain

    def process_input(self, data: bytes) -> bytes:
        if self.mode != EnclaveMode.NORMAL:
            raise HaltedDuringMigration(f"enclave {self.eid} is {self.mode.value}")
        self.chain = chain_step(self.chain, data)
        self.input_log.append(data)
        return self.chain

    def export_state(self, k: bytes, eid_S: int, eid_D: int) -> tuple[bytes, bytes]:
        """Seal D under the transport key and stop processing inputs.

        Raises:
            NoActiveMigration: If the request names another enclave as the source.
            HaltedDuringMigration: If the state was already exported.
        """
        if eid_S != self.eid:
            raise NoActiveMigration(f"export for enclave {eid_S} reached enclave {self.eid}")
        if self.mode != EnclaveMode.NORMAL:
            raise HaltedDuringMigration(f"enclave {self.eid} is {self.mode.value}")
        C, M = aead_seal(k, self.state, transport_aad(self.ID, eid_S, eid_D))
        self.mode = EnclaveMode.EXPORTED_HALTED
        logger.debug("state exported", extra={"eid": self.eid, "size": len(C)})
        return C, M

    def import_state(self, C: bytes, M: bytes, k: bytes, eid_S: int) -> None:
        """Replace D with the decrypted blob; the state is untouched on failure.

        Raises:
            NoActiveMigration: If the enclave is not waiting for an import.
            AuthFailure: If the blob was tampered with or sealed under another session's key.
        """
        if self.mode != EnclaveMode.AWAITING_IMPORT:
            raise NoActiveMigration(f"enclave {self.eid} is not awaiting an import")
        plaintext = aead_open(k, C, M, transport_aad(self.ID, eid_S, self.eid))
        try:
            self._load(plaintext)
        except CodecError as exc:
            raise AuthFailure("imported state is not a canonical enclave state") from exc
        self.mode = EnclaveMode.IMPORTED_WAITING

    def on_rollback(self) -> None:
        if self.mode == EnclaveMode.EXPORTED_HALTED:
            self.mode = EnclaveMode.NORMAL

    def on_commit_signal(self) -> None:
        if self.mode == EnclaveMode.IMPORTED_WAITING:
            self.mode = EnclaveMode.NORMAL

    def seal_state(self, sm: SealingMonitor, ctr_ID: int) -> SealedBlob:
        """Bump the counter and seal D with the new value embedded."""
        value = sm.inc_mc(self.eid, ctr_ID)
        plaintext = CanonicalWriter().uint(value).bytes_(self.state).getvalue()
        C, M = aead_seal(sm.get_sealing_key(self.eid), plaintext, _seal_aad(self.ID, ctr_ID))
        return SealedBlob(ctr_ID=ctr_ID, ciphertext=C, tag=M)

    def unseal_state(self, sm: SealingMonitor, blob: SealedBlob) -> bytes:
        """Restore D from ``blob`` if it is the most recently sealed one.

        Raises:
            AuthFailure: If the blob fails authentication.
            RollbackDetected: If the embedded counter is not the SM's current value.
            OwnerMismatch: If the counter belongs to another software identifier.
        """
        plaintext = aead_open(sm.get_sealing_key(self.eid), blob.ciphertext, blob.tag, _seal_aad(self.ID, blob.ctr_ID))
        reader = CanonicalReader(plaintext)
        embedded, state = reader.uint(), reader.bytes_()
        reader.finish()
        reference = sm.get_mc_value(self.eid, blob.ctr_ID)
        if embedded != reference:
            raise RollbackDetected(f"sealed counter {embedded} does not match current value {reference}")
        self._load(state)
        return state
