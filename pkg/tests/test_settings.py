from __future__ import annotations

import logging

import pytest

from settings import Settings


def test_defaults_are_valid() -> None:
    settings = Settings()
    assert settings.resend_limit == 3
    assert settings.deadline_guard < settings.timeout_sm
    assert settings.level == logging.WARNING


@pytest.mark.parametrize(
    "overrides",
    [
        {"timeout_sm": 0},
        {"hop_latency": -1},
        {"resend_limit": -1},
        {"store_retries": -1},
        {"deadline_guard": 0},
        {"deadline_guard": 10_000},
        {"log_level": "CHATTY"},
    ],
)
def test_invalid_values_are_rejected(overrides: dict) -> None:
    with pytest.raises(ValueError):
        Settings(**overrides)


def test_from_env_reads_prefixed_variables(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("KEYFORT_TIMEOUT_SM", "5000")
    monkeypatch.setenv("KEYFORT_LOG_LEVEL", "debug")
    monkeypatch.setenv("KEYFORT_RESEND_LIMIT", "")
    settings = Settings.from_env()
    assert settings.timeout_sm == 5000
    assert settings.level == logging.DEBUG
    assert settings.resend_limit == 3


def test_from_env_rejects_non_integers(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("KEYFORT_STEP_BUDGET", "lots")
    with pytest.raises(ValueError, match="KEYFORT_STEP_BUDGET"):
        Settings.from_env()


def test_merged_skips_none() -> None:
    base = Settings()
    assert base.merged(timeout_sm=None) is base
    merged = base.merged(timeout_sm=4000, resend_limit=None)
    assert merged.timeout_sm == 4000
    assert merged.resend_limit == base.resend_limit
