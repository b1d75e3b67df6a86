import hashlib
from pathlib import Path
from typing import Dict, Iterator, List, Optional

from pydantic import BaseModel, Field, ValidationError

from errors import SchemaError


class TraceEvent(BaseModel):
    t: int = Field(ge=0)
    seq: int = -1
    kind: str
    src: str = ""
    dst: str = ""
    verdict: str = ""
    sm_state_digest: str = ""
    eid: Optional[int] = None
    detail: Dict[str, str] = Field(default_factory=dict)


class Trace:
    """Ordered event log of one simulation run."""

    def __init__(self, events: Optional[List[TraceEvent]] = None) -> None:
        self.events: List[TraceEvent] = list(events or [])

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def __getitem__(self, index: int) -> TraceEvent:
        return self.events[index]

    def record(self, **fields) -> TraceEvent:
        detail = fields.pop("detail", None) or {}
        event = TraceEvent(detail={key: str(value) for key, value in detail.items()}, **fields)
        self.events.append(event)
        return event

    def of_kind(self, *kinds: str) -> List[TraceEvent]:
        return [event for event in self.events if event.kind in kinds]

    def to_jsonl(self) -> str:
        return "".join(event.model_dump_json() + "\n" for event in self.events)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        events = []
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                events.append(TraceEvent.model_validate_json(line))
            except ValidationError as exc:
                raise SchemaError(f"trace line {number} is not a valid event: {exc}") from exc
        return cls(events)

    @classmethod
    def load(cls, path: str | Path) -> "Trace":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise SchemaError(f"cannot read trace '{path}': {exc}") from exc
        return cls.from_jsonl(text)
