from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, model_validator

from errors import ScenarioError, SchemaError
from models.envelope import FaultPlan


class StoreMode(str, Enum):
    ROLLBACK_RESISTANT = "RollbackResistant"
    ROLLBACK_VULNERABLE = "RollbackVulnerable"


class OperationKind(str, Enum):
    UPDATE = "update"
    MIGRATION = "migration"
    CLONE_ATTACK = "clone_attack"
    ROLLBACK_ATTACK = "rollback_attack"
    STATE_REPLAY_ATTACK = "state_replay_attack"
    TIME_ACCOUNTING = "time_accounting"

    @property
    def protocol(self) -> bool:
        return self in (OperationKind.UPDATE, OperationKind.MIGRATION)


class TimeoutOverrides(BaseModel):
    timeout_sm: Optional[int] = Field(default=None, gt=0)
    timeout_ack: Optional[int] = Field(default=None, gt=0)
    timeout_party: Optional[int] = Field(default=None, gt=0)
    resend_limit: Optional[int] = Field(default=None, ge=0)


class DeviceConfig(BaseModel):
    name: str = Field(pattern=r"^[a-z][a-z0-9_]*$")
    store_mode: StoreMode = StoreMode.ROLLBACK_RESISTANT
    file_backed: bool = False
    timeouts: TimeoutOverrides = Field(default_factory=TimeoutOverrides)


class EnclaveInstall(BaseModel):
    device: str
    id: str = Field(min_length=1, max_length=32)
    version: int = Field(ge=0)
    clone_bound: int = Field(default=1, ge=1)
    binary: str = Field(min_length=1)
    state_size: int = Field(default=0, ge=0, le=1 << 20)
    inputs_before: List[str] = Field(default_factory=list)


class TimedInput(BaseModel):
    at: int = Field(ge=0)
    data: str


class Operation(BaseModel):
    kind: OperationKind
    target: str = Field(min_length=1, max_length=32)
    source: str = "sm0"
    destination: Optional[str] = None
    version: Optional[int] = Field(default=None, ge=0)
    binary: Optional[str] = None
    attempts: int = Field(default=1, ge=1)
    crash_before_attack: bool = False
    schedule: List[Tuple[int, int]] = Field(default_factory=list)
    inputs_during: List[TimedInput] = Field(default_factory=list)
    inputs_after: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _fields_for_kind(self) -> "Operation":
        if self.kind == OperationKind.MIGRATION and not self.destination:
            raise ValueError("a migration needs a 'destination' device")
        if self.kind == OperationKind.UPDATE and (self.version is None or not self.binary):
            raise ValueError("an update needs the new 'version' and 'binary'")
        if self.kind == OperationKind.ROLLBACK_ATTACK and (self.version is None or not self.binary):
            raise ValueError("a rollback attack needs the update 'version' and 'binary'")
        for enter, leave in self.schedule:
            if not 0 <= enter <= leave:
                raise ValueError(f"schedule interval ({enter}, {leave}) is not ordered")
        for (_, leave), (enter, _) in zip(self.schedule, self.schedule[1:]):
            if enter < leave:
                raise ValueError(f"schedule intervals overlap at {enter}")
        return self


class Scenario(BaseModel):
    """Declarative description of one simulation run."""

    seed: int = Field(default=0, ge=0)
    devices: List[DeviceConfig] = Field(min_length=1)
    party_authorized_on: Optional[List[str]] = None
    enclaves: List[EnclaveInstall] = Field(default_factory=list)
    operation: Operation
    faults: FaultPlan = Field(default_factory=FaultPlan)
    expect_violation: bool = False

    @model_validator(mode="after")
    def _devices_exist(self) -> "Scenario":
        names = [device.name for device in self.devices]
        if len(set(names)) != len(names):
            raise ValueError("device names must be unique")
        referenced = [install.device for install in self.enclaves]
        referenced.append(self.operation.source)
        if self.operation.destination:
            referenced.append(self.operation.destination)
        referenced += self.party_authorized_on or []
        for name in referenced:
            if name not in names:
                raise ValueError(f"unknown device '{name}'")
        return self

    def device(self, name: str) -> DeviceConfig:
        return next(device for device in self.devices if device.name == name)

    def target_install(self) -> EnclaveInstall:
        """The install the operation acts on: its target software on its source device."""
        for install in self.enclaves:
            if install.id == self.operation.target and install.device == self.operation.source:
                return install
        raise ScenarioError(f"no install of '{self.operation.target}' on {self.operation.source}")

    @classmethod
    def parse(cls, text: str, source: str = "<scenario>") -> "Scenario":
        try:
            return cls.model_validate_json(text)
        except ValidationError as exc:
            raise SchemaError(f"{source}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise SchemaError(f"cannot read scenario '{path}': {exc}") from exc
        return cls.parse(text, source=str(path))
