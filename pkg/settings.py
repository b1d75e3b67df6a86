"""Runtime defaults for the simulator, overridable from the environment or a .env file."""

import logging
import os
from dataclasses import dataclass, fields, replace

from dotenv import find_dotenv, load_dotenv

# Environment wins over .env so CI can pin values.
load_dotenv(find_dotenv(usecwd=True), override=False)

ENV_PREFIX = "KEYFORT_"


@dataclass(frozen=True, kw_only=True)
class Settings:
    tick_period_ns: int = 100
    timeout_sm: int = 10_000
    timeout_ack: int = 2_000
    timeout_party: int = 20_000
    resend_limit: int = 3
    store_retries: int = 2
    hop_latency: int = 30
    local_latency: int = 1
    deadline_guard: int = 100
    restart_delay: int = 50
    step_budget: int = 100_000
    delay_fault_ticks: int = 50
    log_level: str = "WARNING"

    def __post_init__(self):
        positive = (
            "tick_period_ns",
            "timeout_sm",
            "timeout_ack",
            "timeout_party",
            "hop_latency",
            "local_latency",
            "restart_delay",
            "step_budget",
            "delay_fault_ticks",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"'{name}' must be positive")
        for name in ("resend_limit", "store_retries"):
            if getattr(self, name) < 0:
                raise ValueError(f"'{name}' must not be negative")
        if not 0 < self.deadline_guard < self.timeout_sm:
            raise ValueError("'deadline_guard' must lie strictly between 0 and 'timeout_sm'")
        if logging.getLevelName(self.log_level.upper()) not in (
            logging.DEBUG,
            logging.INFO,
            logging.WARNING,
            logging.ERROR,
            logging.CRITICAL,
        ):
            raise ValueError(f"Unknown log level '{self.log_level}'")

    @property
    def level(self) -> int:
        return logging.getLevelName(self.log_level.upper())

    @classmethod
    def from_env(cls) -> "Settings":
        """Build settings from KEYFORT_* environment variables.

        Unset variables keep the dataclass default.

        Raises:
            ValueError: If a variable does not parse or fails validation.
        """
        values: dict[str, object] = {}
        for field in fields(cls):
            raw = os.environ.get(ENV_PREFIX + field.name.upper())
            if raw is None or raw == "":
                continue
            if field.type in (int, "int"):
                try:
                    values[field.name] = int(raw)
                except ValueError as exc:
                    raise ValueError(
                        f"{ENV_PREFIX}{field.name.upper()} must be an integer, got '{raw}'"
                    ) from exc
            else:
                values[field.name] = raw
        return cls(**values)

    def merged(self, **overrides: int | str | None) -> "Settings":
        """Return a copy with the non-None overrides applied."""
        changes = {key: value for key, value in overrides.items() if value is not None}
        return replace(self, **changes) if changes else self
