# Параметры запуска из командной строки
import hashlib
import json
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.schemas.control import METHODS


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: str = "full"
    level: Optional[int] = None
    scenario: Optional[Path] = None
    seeds: list[int] = Field(default_factory=lambda: [0])
    out: Path = Path("runs")
    budget: Optional[int] = Field(default=None, ge=1)
    beta: Optional[float] = Field(default=None, gt=0)
    conflict_window: Optional[int] = Field(default=None, ge=0)
    stop_window: Optional[int] = Field(default=None, ge=0)
    speed_profile: Optional[str] = None
    filter_failed: bool = False
    write_traces: bool = True

    @field_validator("method")
    @classmethod
    def _known_method(cls, v: str) -> str:
        if v not in METHODS:
            raise ValueError(f"unknown method '{v}', expected one of {METHODS}")
        return v

    @model_validator(mode="after")
    def _check(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.level is None and self.scenario is None:
            raise ValueError("either a level or a scenario file is required")
        return self

    def config_hash(self) -> str:
        """Хэш параметров, влияющих на результат (без seed и каталога)"""
        payload = self.model_dump(mode="json", exclude={"seeds", "out", "filter_failed", "write_traces"})
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:12]


def parse_seeds(text: str) -> list[int]:
    """'7', '0..9' (включительно) или '1,3,5'"""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise ValueError(f"empty seed range '{part}'")
            seeds.extend(range(lo_i, hi_i + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds
