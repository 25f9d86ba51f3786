# Формат трассы эпизода: заголовок, записи тактов, итог (JSON lines)
import json
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, Field, ValidationError

from app.core.errors import TraceError
from app.schemas.scenario import Scenario

TRACE_VERSION = "railflow-trace/1"


class TraceHeader(BaseModel):
    kind: Literal["header"] = "header"
    version: str = TRACE_VERSION
    scenario: Scenario
    map_hash: str
    seed: int
    method: str
    controller: Optional[dict[str, Any]] = None
    t_max: int
    cycle_policy: str
    layout_version: str
    knobs: dict[str, Any] = Field(default_factory=dict)


class TickRecord(BaseModel):
    kind: Literal["tick"] = "tick"
    t: int
    actions: list[int]
    events: list[list[Any]]
    active: int
    deadlocked: list[int] = Field(default_factory=list)


class TraceFooter(BaseModel):
    kind: Literal["footer"] = "footer"
    ticks: int
    metrics: dict[str, Any]
    decision_stats: dict[str, Any] = Field(default_factory=dict)


class Trace(BaseModel):
    header: TraceHeader
    ticks: list[TickRecord] = Field(default_factory=list)
    footer: Optional[TraceFooter] = None

    def lines(self) -> list[str]:
        out = [self.header.model_dump_json()]
        out += [t.model_dump_json() for t in self.ticks]
        if self.footer is not None:
            out.append(self.footer.model_dump_json())
        return out

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.lines()) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Path) -> "Trace":
        try:
            raw = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        except (OSError, json.JSONDecodeError) as e:
            raise TraceError(f"cannot read trace {path}: {e}") from e
        if not raw or raw[0].get("kind") != "header":
            raise TraceError(f"trace {path} has no header")
        if raw[0].get("version") != TRACE_VERSION:
            raise TraceError(f"trace version {raw[0].get('version')!r} is not {TRACE_VERSION!r}")
        try:
            header = TraceHeader.model_validate(raw[0])
            ticks = [TickRecord.model_validate(r) for r in raw[1:] if r.get("kind") == "tick"]
            footers = [TraceFooter.model_validate(r) for r in raw[1:] if r.get("kind") == "footer"]
        except ValidationError as e:
            raise TraceError(f"malformed trace {path}: {e}") from e
        return cls(header=header, ticks=ticks, footer=footers[-1] if footers else None)
