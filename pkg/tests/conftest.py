from __future__ import annotations

from pathlib import Path
from random import Random
from typing import Any

import pytest

from crypto_shim import KeyDirectory, public_key_id
from models.scenario import Scenario
from persistence import MemoryMedia, SecureStore
from security_monitor import SecurityMonitor
from settings import Settings
from vclock import VirtualClock

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

PARTY_KEY = bytes(range(32))


@pytest.fixture
def settings() -> Settings:
    return Settings()


@pytest.fixture
def scenarios_dir() -> Path:
    return SCENARIOS


def make_scenario(
    *,
    kind: str = "update",
    devices: tuple[str, ...] = ("sm0",),
    seed: int = 1,
    state_size: int = 0,
    inputs_before: list[str] | None = None,
    clone_bound: int = 1,
    faults: dict[str, Any] | None = None,
    **operation: Any,
) -> Scenario:
    """Small keyword-only factory for one-install scenarios on ``sm0``."""
    body: dict[str, Any] = {"kind": kind, "target": "app", "source": "sm0"}
    if kind == "update":
        body.update(version=2, binary="app-v2")
    if kind == "migration":
        body.update(destination="sm1")
    body.update(operation)
    return Scenario.model_validate(
        {
            "seed": seed,
            "devices": [{"name": name} for name in devices],
            "enclaves": [
                {
                    "device": "sm0",
                    "id": "app",
                    "version": 1,
                    "binary": "app-v1",
                    "clone_bound": clone_bound,
                    "state_size": state_size,
                    "inputs_before": inputs_before or [],
                }
            ],
            "operation": body,
            "faults": faults or {},
        }
    )


class MonitorBench:
    """A lone SM with an authorized party and a shared clock, for SBI-level tests."""

    def __init__(self, name: str = "sm0", seed: int = 0, settings: Settings | None = None) -> None:
        rng = Random(seed)
        self.clock = VirtualClock()
        self.directory = KeyDirectory(Random(seed + 1))
        self.party_pk = public_key_id(PARTY_KEY)
        self.device_key = rng.randbytes(32)
        self.store = SecureStore(b"k" * 32, media=MemoryMedia(), name=name)
        self.events: list[tuple[str, int | None, str, dict]] = []
        self.sm = SecurityMonitor(
            name=name,
            device_key=self.device_key,
            store=self.store,
            clock=self.clock,
            directory=self.directory,
            authorized_parties={self.party_pk},
            settings=settings or Settings(),
            rng=Random(seed + 2),
            observer=lambda kind, eid, verdict, detail: self.events.append((kind, eid, verdict, detail)),
        )
        self.directory.register(self.party_pk, self.sm.device_pk)


@pytest.fixture
def bench() -> MonitorBench:
    return MonitorBench()
