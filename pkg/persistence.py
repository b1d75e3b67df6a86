"""Simulated replay-protected non-volatile storage (an RPMB stand-in).

Every key is stored as ``write_counter (8 bytes BE) || MAC (16 bytes) || payload``.
Writes go through a shadow copy and an atomic commit that also advances the
replay-protected counter, so a crash leaves either the old or the new image.
The replay-protected counters live with the store object, out of reach of
the adversary who can only capture and re-present the media files.
"""

import logging
import os
import struct
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Iterable, Optional

from crypto_shim import mac_sign, mac_verify
from errors import RollbackDetected, SimulatedCrash, StoreFault, StoreTampered
from models.codec import CanonicalReader, CanonicalWriter
from models.common import MAC_SIZE
from models.counters import MonotonicCounter, VersionEntry
from models.migration import MigrationRecord
from models.scenario import StoreMode

logger = logging.getLogger(__name__)

VERSIONS = "versions"
COUNTERS = "counters"
MIGRATIONS = "migrations"
SCHEDULED = "scheduled"
BLACKLIST = "blacklist"

WRITE_STAGES = ("write-shadow", "sync", "commit")

_HEADER = struct.Struct(">Q")


class Media(ABC):
    """Raw storage the adversary can read and rewrite wholesale."""

    @abstractmethod
    def read(self, name: str) -> Optional[bytes]: ...

    @abstractmethod
    def write_shadow(self, name: str, data: bytes) -> None: ...

    @abstractmethod
    def sync(self, name: str) -> None: ...

    @abstractmethod
    def commit(self, name: str) -> None: ...

    @abstractmethod
    def capture(self) -> dict[str, bytes]: ...

    @abstractmethod
    def present(self, image: dict[str, bytes]) -> None: ...


class MemoryMedia(Media):
    def __init__(self) -> None:
        self._files: dict[str, bytes] = {}
        self._shadow: dict[str, bytes] = {}

    def read(self, name: str) -> Optional[bytes]:
        return self._files.get(name)

    def write_shadow(self, name: str, data: bytes) -> None:
        self._shadow[name] = bytes(data)

    def sync(self, name: str) -> None:
        if name not in self._shadow:
            raise StoreFault(f"no shadow copy of {name} to sync")

    def commit(self, name: str) -> None:
        self._files[name] = self._shadow.pop(name)

    def capture(self) -> dict[str, bytes]:
        return dict(self._files)

    def present(self, image: dict[str, bytes]) -> None:
        self._files = dict(image)
        self._shadow.clear()


class FileMedia(Media):
    """One directory per SM holding ``<key>.bin`` files."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, name: str) -> Path:
        return self.root / f"{name}.bin"

    def _shadow_path(self, name: str) -> Path:
        return self.root / f"{name}.bin.shadow"

    def read(self, name: str) -> Optional[bytes]:
        path = self._path(name)
        return path.read_bytes() if path.exists() else None

    def write_shadow(self, name: str, data: bytes) -> None:
        self._shadow_path(name).write_bytes(data)

    def sync(self, name: str) -> None:
        with open(self._shadow_path(name), "rb+") as handle:
            handle.flush()
            os.fsync(handle.fileno())

    def commit(self, name: str) -> None:
        os.replace(self._shadow_path(name), self._path(name))

    def capture(self) -> dict[str, bytes]:
        return {path.stem: path.read_bytes() for path in sorted(self.root.glob("*.bin"))}

    def present(self, image: dict[str, bytes]) -> None:
        for path in self.root.glob("*.bin*"):
            path.unlink()
        for name, data in image.items():
            self._path(name).write_bytes(data)


class SecureStore:
    def __init__(
        self,
        storage_key: bytes,
        mode: StoreMode = StoreMode.ROLLBACK_RESISTANT,
        media: Optional[Media] = None,
        name: str = "store",
    ) -> None:
        self.name = name
        self.mode = mode
        self.media = media or MemoryMedia()
        self.write_counter = 0
        self.loaded_counters: dict[str, list[int]] = {}
        self._key = storage_key
        self._replay_protected: dict[str, int] = {}
        self._crash_stage: Optional[str] = None
        self._io_fault_armed = False
        self._failing_puts: set[int] = set()
        self.put_count = 0

    def arm_crash(self, stage: str) -> None:
        if stage not in WRITE_STAGES:
            raise ValueError(f"unknown write stage '{stage}'")
        self._crash_stage = stage

    def arm_io_fault(self, put_index: Optional[int] = None) -> None:
        """Fail the next put, or the put with the given zero-based index."""
        if put_index is None:
            self._io_fault_armed = True
        else:
            self._failing_puts.add(put_index)

    def _stage(self, stage: str) -> None:
        if self._crash_stage == stage:
            self._crash_stage = None
            raise SimulatedCrash(self.name, f"store:{stage}")

    def _tag(self, key: str, counter: int, value: bytes) -> bytes:
        return mac_sign(self._key, CanonicalWriter().text(key).uint(counter).bytes_(value).getvalue())

    def put(self, key: str, value: bytes) -> None:
        index = self.put_count
        self.put_count += 1
        if self._io_fault_armed or index in self._failing_puts:
            self._io_fault_armed = False
            self._failing_puts.discard(index)
            logger.warning("injected I/O fault", extra={"store": self.name, "key": key})
            raise StoreFault(f"I/O fault writing '{key}'")
        counter = self.write_counter + 1
        image = _HEADER.pack(counter) + self._tag(key, counter, value) + value
        self._stage("write-shadow")
        self.media.write_shadow(key, image)
        self._stage("sync")
        self.media.sync(key)
        self._stage("commit")
        self.media.commit(key)
        self.write_counter = counter
        self._replay_protected[key] = counter

    def get(self, key: str) -> Optional[bytes]:
        raw = self.media.read(key)
        expected = self._replay_protected.get(key)
        if raw is None:
            if expected is not None and self.mode == StoreMode.ROLLBACK_RESISTANT:
                raise RollbackDetected(f"'{key}' vanished after write {expected}")
            return None
        if len(raw) < _HEADER.size + MAC_SIZE:
            raise StoreTampered(f"'{key}' is truncated")
        (counter,) = _HEADER.unpack(raw[: _HEADER.size])
        tag = raw[_HEADER.size : _HEADER.size + MAC_SIZE]
        value = raw[_HEADER.size + MAC_SIZE :]
        if not mac_verify(self._key, CanonicalWriter().text(key).uint(counter).bytes_(value).getvalue(), tag):
            raise StoreTampered(f"'{key}' fails its MAC")
        if self.mode == StoreMode.ROLLBACK_RESISTANT and counter != expected:
            raise RollbackDetected(f"'{key}' carries write {counter}, expected {expected}")
        self.loaded_counters.setdefault(key, []).append(counter)
        return value


def _encode_list(items: Iterable) -> bytes:
    items = list(items)
    writer = CanonicalWriter().uint(len(items))
    for item in items:
        writer.raw(item)
    return writer.getvalue()


def persist_versions(store: SecureStore, entries: Iterable[VersionEntry]) -> None:
    ordered = sorted(entries, key=lambda entry: entry.ID)
    store.put(VERSIONS, _encode_list(entry.canonical_bytes() for entry in ordered))


def load_versions(store: SecureStore) -> list[VersionEntry]:
    raw = store.get(VERSIONS)
    if raw is None:
        return []
    reader = CanonicalReader(raw)
    entries = [VersionEntry.read_from(reader) for _ in range(reader.uint())]
    reader.finish()
    return entries


def persist_counters(store: SecureStore, counters: Iterable[MonotonicCounter], next_id: int) -> None:
    ordered = sorted(counters, key=lambda counter: counter.ctr_ID)
    payload = CanonicalWriter().uint(next_id).raw(_encode_list(c.canonical_bytes() for c in ordered))
    store.put(COUNTERS, payload.getvalue())


def load_counters(store: SecureStore) -> tuple[list[MonotonicCounter], int]:
    """Return the persisted counters and the next ctr_ID to hand out."""
    raw = store.get(COUNTERS)
    if raw is None:
        return [], 1
    reader = CanonicalReader(raw)
    next_id = reader.uint()
    counters = [MonotonicCounter.read_from(reader) for _ in range(reader.uint())]
    reader.finish()
    return counters, next_id


def persist_schedule(store: SecureStore, software_ids: Iterable[bytes]) -> None:
    writer = CanonicalWriter()
    ids = list(software_ids)
    writer.uint(len(ids))
    for software_id in ids:
        writer.bytes_(software_id)
    store.put(SCHEDULED, writer.getvalue())


def load_schedule(store: SecureStore) -> list[bytes]:
    raw = store.get(SCHEDULED)
    if raw is None:
        return []
    reader = CanonicalReader(raw)
    ids = [reader.bytes_() for _ in range(reader.uint())]
    reader.finish()
    return ids


def persist_migration_records(store: SecureStore, records: Iterable[MigrationRecord]) -> None:
    """Write the full record list. The transport seed is never persisted."""
    ordered = sorted(records, key=lambda record: record.ID)
    store.put(
        MIGRATIONS,
        _encode_list(record.canonical_bytes(include_seed=False) for record in ordered),
    )


def load_migration_metadata(store: SecureStore) -> list[MigrationRecord]:
    raw = store.get(MIGRATIONS)
    if raw is None:
        return []
    reader = CanonicalReader(raw)
    records = [MigrationRecord.read_from(reader) for _ in range(reader.uint())]
    reader.finish()
    return records


def persist_migration_metadata(store: SecureStore, rec: MigrationRecord) -> None:
    """Insert or replace the record for ``rec.ID``."""
    records = [record for record in load_migration_metadata(store) if record.ID != rec.ID]
    records.append(rec)
    persist_migration_records(store, records)


def drop_migration_metadata(store: SecureStore, software_id: bytes) -> None:
    records = load_migration_metadata(store)
    persist_migration_records(store, [record for record in records if record.ID != software_id])


def persist_blacklist(store: SecureStore, measurements: Iterable[bytes]) -> None:
    ordered = sorted(measurements)
    writer = CanonicalWriter().uint(len(ordered))
    for m in ordered:
        writer.bytes_(m)
    store.put(BLACKLIST, writer.getvalue())


def load_blacklist(store: SecureStore) -> set[bytes]:
    raw = store.get(BLACKLIST)
    if raw is None:
        return set()
    reader = CanonicalReader(raw)
    measurements = {reader.bytes_() for _ in range(reader.uint())}
    reader.finish()
    return measurements
