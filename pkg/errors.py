"""Exception hierarchy shared by every KEYFORT component.

Each error's ``code`` is its class name; traces record it as the verdict of
the rejected request.
"""


class KeyfortError(Exception):
    """Base class for all domain errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


class SimulatedCrash(Exception):
    """Raised by fault injection to abort a component in the middle of a handler."""

    def __init__(self, component: str, stage: str):
        super().__init__(f"{component} crashed at {stage}")
        self.component = component
        self.stage = stage


# core model / lifecycle


class LifecycleError(KeyfortError):
    pass


class InvalidCloneBound(LifecycleError):
    pass


class UnknownEnclave(LifecycleError):
    pass


class ResumeDenied(LifecycleError):
    pass


class NestedEntry(LifecycleError):
    pass


class NotEntered(LifecycleError):
    pass


class VersionMismatch(LifecycleError):
    pass


class CloneLimitExceeded(LifecycleError):
    pass


class MeasurementBlacklisted(LifecycleError):
    pass


class HaltedDuringMigration(LifecycleError):
    pass


# authorization


class AuthorizationError(KeyfortError):
    pass


class Unauthorized(AuthorizationError):
    pass


class NotMyKey(AuthorizationError):
    pass


# migration and update


class MigrationError(KeyfortError):
    pass


class AlreadyScheduled(MigrationError):
    pass


class EnclaveExists(MigrationError):
    pass


class NoEligibleEnclave(MigrationError):
    pass


class TooManyInstances(MigrationError):
    pass


class MeasurementMismatch(MigrationError):
    pass


class VersionOrderViolation(MigrationError):
    pass


class AlreadyMigrating(MigrationError):
    pass


class NoActiveMigration(MigrationError):
    pass


class NotDestination(MigrationError):
    pass


# monotonic counters


class CounterError(KeyfortError):
    pass


class UnknownCounter(CounterError):
    pass


class OwnerMismatch(CounterError):
    pass


# crypto


class CryptoError(KeyfortError):
    pass


class EmptyBinary(CryptoError):
    pass


class MalformedSeed(CryptoError):
    pass


class AuthFailure(CryptoError):
    pass


class VerifyFailure(CryptoError):
    pass


class CodecError(KeyfortError):
    """Canonical bytes were truncated or carried trailing data."""


# persistence


class StoreError(KeyfortError):
    pass


class StoreFault(StoreError):
    """A write failed (simulated I/O fault); nothing was committed."""


class StoreTampered(StoreError):
    pass


class RollbackDetected(StoreError):
    pass


# harness


class HarnessError(KeyfortError):
    pass


class SchemaError(HarnessError):
    pass


class ScenarioError(SchemaError):
    pass


class StepBudgetExceeded(HarnessError):
    pass


class AmbiguousTerminalState(HarnessError):
    pass
