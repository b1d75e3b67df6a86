"""Cryptographic primitives used by the SM, the enclaves and the channel.

Everything goes through a ``CryptoBackend`` so a different implementation
can be installed with ``set_backend``. The default backend is deterministic:
AEAD nonces are synthetic (derived from key, aad and plaintext), which keeps
simulation traces byte-identical under a seed.
"""

import hashlib
import hmac
import logging
from abc import ABC, abstractmethod
from random import Random

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from errors import AuthFailure, EmptyBinary, MalformedSeed, VerifyFailure
from models.attestation import AttestationReport
from models.codec import CanonicalWriter
from models.common import DIGEST_SIZE, MAC_SIZE

logger = logging.getLogger(__name__)

NONCE_SIZE = 12


class CryptoBackend(ABC):
    @abstractmethod
    def digest(self, data: bytes) -> bytes: ...

    @abstractmethod
    def mac(self, key: bytes, msg: bytes) -> bytes: ...

    @abstractmethod
    def seal(self, key: bytes, plaintext: bytes, aad: bytes) -> tuple[bytes, bytes]: ...

    @abstractmethod
    def open(self, key: bytes, ciphertext: bytes, tag: bytes, aad: bytes) -> bytes: ...

    @abstractmethod
    def public_key(self, secret: bytes) -> bytes: ...

    @abstractmethod
    def sign(self, secret: bytes, msg: bytes) -> bytes: ...

    @abstractmethod
    def verify(self, public: bytes, msg: bytes, sig: bytes) -> bool: ...


class SoftwareBackend(CryptoBackend):
    """SHA-256, truncated HMAC-SHA256, AES-256-GCM with synthetic IVs, Ed25519."""

    def digest(self, data: bytes) -> bytes:
        return hashlib.sha256(data).digest()

    def mac(self, key: bytes, msg: bytes) -> bytes:
        return hmac.new(key, msg, hashlib.sha256).digest()[:MAC_SIZE]

    def seal(self, key: bytes, plaintext: bytes, aad: bytes) -> tuple[bytes, bytes]:
        siv = hmac.new(key, b"siv" + _frame(aad) + plaintext, hashlib.sha256).digest()
        nonce = siv[:NONCE_SIZE]
        sealed = AESGCM(key).encrypt(nonce, plaintext, aad)
        return nonce + sealed[:-MAC_SIZE], sealed[-MAC_SIZE:]

    def open(self, key: bytes, ciphertext: bytes, tag: bytes, aad: bytes) -> bytes:
        if len(ciphertext) < NONCE_SIZE or len(tag) != MAC_SIZE:
            raise AuthFailure("malformed ciphertext or tag")
        nonce, body = ciphertext[:NONCE_SIZE], ciphertext[NONCE_SIZE:]
        try:
            return AESGCM(key).decrypt(nonce, body + tag, aad)
        except InvalidTag as exc:
            raise AuthFailure("authentication tag does not verify") from exc

    def public_key(self, secret: bytes) -> bytes:
        return (
            Ed25519PrivateKey.from_private_bytes(secret)
            .public_key()
            .public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        )

    def sign(self, secret: bytes, msg: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(secret).sign(msg)

    def verify(self, public: bytes, msg: bytes, sig: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public).verify(sig, msg)
        except (InvalidSignature, ValueError):
            return False
        return True


def _frame(data: bytes) -> bytes:
    return len(data).to_bytes(4, "big") + data


_backend: CryptoBackend = SoftwareBackend()


def get_backend() -> CryptoBackend:
    return _backend


def set_backend(backend: CryptoBackend) -> CryptoBackend:
    """Install ``backend`` and return the previous one."""
    global _backend
    previous, _backend = _backend, backend
    logger.info("crypto backend switched", extra={"backend": type(backend).__name__})
    return previous


def digest(*parts: bytes) -> bytes:
    """H over the exact concatenation of ``parts``."""
    return _backend.digest(b"".join(parts))


def measure(binary: bytes) -> bytes:
    if not binary:
        raise EmptyBinary("cannot measure an empty binary")
    return _backend.digest(binary)


def derive_transport_key(s: bytes, m_S: bytes, m_D: bytes) -> bytes:
    """k = H(s || m_S || m_D).

    Raises:
        MalformedSeed: If the seed is not 32 bytes.
    """
    if len(s) != DIGEST_SIZE:
        raise MalformedSeed(f"seed must be {DIGEST_SIZE} bytes, got {len(s)}")
    return digest(s, m_S, m_D)


def transport_aad(software_id: bytes, eid_S: int, eid_D: int) -> bytes:
    return CanonicalWriter().bytes_(software_id).uint(eid_S).uint(eid_D).getvalue()


def aead_seal(k: bytes, plaintext: bytes, aad: bytes) -> tuple[bytes, bytes]:
    return _backend.seal(k, plaintext, aad)


def aead_open(k: bytes, C: bytes, M: bytes, aad: bytes) -> bytes:
    return _backend.open(k, C, M, aad)


def mac_sign(k: bytes, msg: bytes) -> bytes:
    return _backend.mac(k, msg)


def mac_verify(k: bytes, msg: bytes, tag: bytes) -> bool:
    if len(tag) != MAC_SIZE:
        return False
    return hmac.compare_digest(_backend.mac(k, msg), tag)


def public_key_id(secret: bytes) -> bytes:
    return _backend.public_key(secret)


def attest_sign(device_key: bytes, report: AttestationReport) -> AttestationReport:
    return report.model_copy(update={"sig": _backend.sign(device_key, report.signed_bytes())})


def attest_verify(device_pk: bytes, report: AttestationReport) -> None:
    """Check a report signature.

    Raises:
        VerifyFailure: If the fields were modified or the key does not match.
    """
    if not _backend.verify(device_pk, report.signed_bytes(), report.sig):
        raise VerifyFailure("attestation signature does not verify")


def sealing_key(device_key: bytes, m: bytes) -> bytes:
    return digest(b"keyfort-seal", device_key, m)


def storage_key(device_key: bytes) -> bytes:
    return digest(b"keyfort-store", device_key)


class KeyDirectory:
    """Pre-shared channel secrets, one per unordered pair of public keys.

    Stands in for established TLS sessions: both ends of a pair look up the
    same secret. A pair of a key with itself is a device's local SBI key.
    """

    def __init__(self, rng: Random) -> None:
        self._rng = rng
        self._pairs: dict[tuple[bytes, bytes], bytes] = {}

    @staticmethod
    def _pair(pk_a: bytes, pk_b: bytes) -> tuple[bytes, bytes]:
        return (pk_a, pk_b) if pk_a <= pk_b else (pk_b, pk_a)

    def _secret(self, pk_a: bytes, pk_b: bytes) -> bytes:
        pair = self._pair(pk_a, pk_b)
        if pair not in self._pairs:
            self._pairs[pair] = self._rng.randbytes(DIGEST_SIZE)
        return self._pairs[pair]

    def register(self, *pks: bytes) -> None:
        """Create secrets for every pair among ``pks`` in a deterministic order."""
        ordered = sorted(set(pks))
        for i, pk_a in enumerate(ordered):
            for pk_b in ordered[i:]:
                self._secret(pk_a, pk_b)

    def mac_key(self, pk_a: bytes, pk_b: bytes) -> bytes:
        return digest(b"keyfort-mac", self._secret(pk_a, pk_b))

    def session_key(self, pk_S: bytes, pk_D: bytes, session_id: bytes) -> bytes:
        return digest(b"keyfort-session", self._secret(pk_S, pk_D), session_id)

    def secrets(self) -> list[bytes]:
        return list(self._pairs.values())
