from __future__ import annotations

from pathlib import Path

import pytest

from crypto_shim import measure
from errors import RollbackDetected, SimulatedCrash, StoreFault, StoreTampered
from models.counters import MonotonicCounter, VersionEntry
from models.migration import MigrationRecord, TargetOp
from models.scenario import StoreMode
from persistence import (
    FileMedia,
    MemoryMedia,
    SecureStore,
    drop_migration_metadata,
    load_blacklist,
    load_counters,
    load_migration_metadata,
    load_schedule,
    load_versions,
    persist_blacklist,
    persist_counters,
    persist_migration_metadata,
    persist_schedule,
    persist_versions,
)

KEY = b"s" * 32


def _store(mode: StoreMode = StoreMode.ROLLBACK_RESISTANT, media=None) -> SecureStore:
    return SecureStore(KEY, mode=mode, media=media or MemoryMedia(), name="sm0")


def _record(software_id: bytes = b"wallet") -> MigrationRecord:
    pk = bytes(32)
    return MigrationRecord(
        ID=software_id,
        target_op=TargetOp.MIGRATION_SOURCE,
        eid_S=1,
        eid_D=2,
        m_S=measure(b"x"),
        m_D=measure(b"x"),
        pk_S=pk,
        pk_D=b"\x01" * 32,
        s=b"\x07" * 32,
        T_SM=100,
    )


def test_put_then_get() -> None:
    store = _store()
    assert store.get("versions") is None
    store.put("versions", b"one")
    store.put("versions", b"two")
    assert store.get("versions") == b"two"
    assert store.write_counter == 2


@pytest.mark.parametrize(
    ("mode", "stale_visible"),
    [(StoreMode.ROLLBACK_RESISTANT, False), (StoreMode.ROLLBACK_VULNERABLE, True)],
)
def test_stale_image(mode: StoreMode, stale_visible: bool) -> None:
    store = _store(mode)
    store.put("counters", b"old")
    image = store.media.capture()
    store.put("counters", b"new")
    store.media.present(image)
    if stale_visible:
        assert store.get("counters") == b"old"
    else:
        with pytest.raises(RollbackDetected):
            store.get("counters")


def test_deleted_entry_is_a_rollback() -> None:
    store = _store()
    store.put("scheduled", b"x")
    store.media.present({})
    with pytest.raises(RollbackDetected):
        store.get("scheduled")


def test_tampered_image_is_detected() -> None:
    store = _store()
    store.put("versions", b"payload")
    image = store.media.capture()
    raw = bytearray(image["versions"])
    raw[-1] ^= 0x01
    store.media.present({"versions": bytes(raw)})
    with pytest.raises(StoreTampered):
        store.get("versions")
    store.media.present({"versions": b"\x00"})
    with pytest.raises(StoreTampered):
        store.get("versions")


def test_io_fault_commits_nothing() -> None:
    store = _store()
    store.put("versions", b"kept")
    store.arm_io_fault()
    with pytest.raises(StoreFault):
        store.put("versions", b"lost")
    assert store.get("versions") == b"kept"
    store.put("versions", b"next")
    assert store.get("versions") == b"next"


def test_io_fault_by_write_index() -> None:
    store = _store()
    store.arm_io_fault(1)
    store.put("a", b"0")
    with pytest.raises(StoreFault):
        store.put("a", b"1")
    assert store.get("a") == b"0"


@pytest.mark.parametrize("stage", ["write-shadow", "sync", "commit"])
def test_crash_mid_write_keeps_previous_value(stage: str) -> None:
    store = _store()
    store.put("versions", b"kept")
    store.arm_crash(stage)
    with pytest.raises(SimulatedCrash):
        store.put("versions", b"lost")
    assert store.get("versions") == b"kept"


def test_unknown_write_stage() -> None:
    with pytest.raises(ValueError):
        _store().arm_crash("flush")


def test_file_media_layout(tmp_path: Path) -> None:
    store = _store(media=FileMedia(tmp_path / "sm0"))
    store.put("versions", b"v")
    assert sorted(path.name for path in (tmp_path / "sm0").iterdir()) == ["versions.bin"]
    image = store.media.capture()
    store.put("versions", b"w")
    store.media.present(image)
    with pytest.raises(RollbackDetected):
        store.get("versions")


def test_typed_snapshots() -> None:
    store = _store()
    persist_versions(store, [VersionEntry(ID=b"b", v_latest=2), VersionEntry(ID=b"a", v_latest=1)])
    assert [entry.ID for entry in load_versions(store)] == [b"a", b"b"]

    persist_counters(store, [MonotonicCounter(ctr_ID=1, ctr_val=4, owner=b"a")], next_id=3)
    counters, next_id = load_counters(store)
    assert counters[0].ctr_val == 4
    assert next_id == 3

    persist_schedule(store, [b"a", b"b"])
    assert load_schedule(store) == [b"a", b"b"]


def test_empty_store_loads_defaults() -> None:
    store = _store()
    assert load_versions(store) == []
    assert load_counters(store) == ([], 1)
    assert load_schedule(store) == []
    assert load_migration_metadata(store) == []


def test_migration_metadata_never_stores_the_seed() -> None:
    store = _store()
    persist_migration_metadata(store, _record())
    persist_migration_metadata(store, _record(b"other"))
    loaded = load_migration_metadata(store)
    assert [record.ID for record in loaded] == [b"other", b"wallet"]
    assert all(record.s is None for record in loaded)

    drop_migration_metadata(store, b"wallet")
    assert [record.ID for record in load_migration_metadata(store)] == [b"other"]


def test_loaded_counters_are_kept_per_key() -> None:
    store = _store(StoreMode.ROLLBACK_VULNERABLE)
    store.put("versions", b"v1")
    store.put("counters", b"c1")
    image = store.media.capture()
    store.put("versions", b"v2")
    store.get("versions")
    store.get("counters")
    store.media.present(image)
    store.get("versions")
    assert store.loaded_counters == {"versions": [3, 1], "counters": [2]}


def test_blacklist_survives_a_reload() -> None:
    store = _store()
    assert load_blacklist(store) == set()
    persist_blacklist(store, {measure(b"b"), measure(b"a")})
    assert load_blacklist(store) == {measure(b"a"), measure(b"b")}
