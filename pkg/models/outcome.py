from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class OutcomeKind(str, Enum):
    COMMITTED = "Committed"
    ABORTED_SOURCE_ACTIVE = "AbortedSourceActive"
    ALARM_NEITHER_ACTIVE = "AlarmNeitherActive"
    REJECTED_AT_INIT = "RejectedAtInit"
    # non-protocol scenarios
    ATTACK_REJECTED = "AttackRejected"
    ATTACK_SUCCEEDED = "AttackSucceeded"
    COMPLETED = "Completed"


LEGAL_PROTOCOL_OUTCOMES = frozenset(
    {
        OutcomeKind.COMMITTED,
        OutcomeKind.ABORTED_SOURCE_ACTIVE,
        OutcomeKind.ALARM_NEITHER_ACTIVE,
        OutcomeKind.REJECTED_AT_INIT,
    }
)


class OperationOutcome(BaseModel):
    kind: OutcomeKind
    final_versions: Dict[str, int] = Field(default_factory=dict)
    trace_ref: str = ""
    detail: str = ""


class Violation(BaseModel):
    predicate: str
    index: int
    message: str


class SweepCase(BaseModel):
    index: int
    fault: str
    outcome: Optional[OutcomeKind] = None
    violations: List[Violation] = Field(default_factory=list)
    error: str = ""


class SweepReport(BaseModel):
    scenario: str
    spec: str
    message_cases: int
    crash_cases: int
    store_fault_cases: int = 0
    total_cases: int
    arithmetic: str
    outcome_counts: Dict[str, int] = Field(default_factory=dict)
    cases: List[SweepCase] = Field(default_factory=list)
    violations: List[Violation] = Field(default_factory=list)
    wall_time_s: float = 0.0
    digest: str = ""
