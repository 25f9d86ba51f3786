# Pydantic-схемы сценария: сеть, расписание, параметры эпизода
import math
from fractions import Fraction
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator

from app.config import settings
from app.core.errors import ScenarioError
from app.core.rail import Heading, Pose, RailGrid, allowed_exits


class GeneratorParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: int = Field(..., ge=4)
    height: int = Field(..., ge=4)
    n_cities: int = Field(..., ge=2)
    max_parallel_rails: int = Field(default=2, ge=1, le=2)
    seed: int = 0


class GridDocument(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: int
    height: int
    cells: list[int]
    stations: list[tuple[int, int, int]]

    @model_validator(mode="after")
    def _check_size(self):
        if len(self.cells) != self.width * self.height:
            raise ValueError("cells length does not match width*height")
        return self

    @classmethod
    def from_grid(cls, grid: RailGrid) -> "GridDocument":
        return cls(**grid.to_dict())


class TimetableEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    train: int = Field(..., ge=0)
    origin: tuple[int, int]
    origin_heading: int = Field(..., ge=0, le=3)
    target: tuple[int, int]
    earliest_departure: int = Field(..., ge=0)
    scheduled_arrival: int = Field(..., ge=1)
    speed: float = Field(default=1.0, gt=0, le=1)

    @model_validator(mode="after")
    def _check_times(self):
        if self.earliest_departure >= self.scheduled_arrival:
            raise ValueError("earliest_departure must precede scheduled_arrival")
        return self

    @property
    def origin_pose(self) -> Pose:
        return Pose(tuple(self.origin), Heading(self.origin_heading))

    @property
    def speed_fraction(self) -> Fraction:
        return Fraction(self.speed).limit_denominator(64)


class EpisodeConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    malfunction_rate: float = Field(default=0.0, ge=0, le=1)
    malfunction_duration: tuple[int, int] = (20, 50)
    # Политика циклов движения: отклоняются все циклические зависимости
    reject_cycles: bool = True

    @field_validator("malfunction_duration")
    @classmethod
    def _check_range(cls, v):
        lo, hi = v
        if lo < 1 or lo > hi:
            raise ValueError("malfunction_duration must satisfy 1 <= lo <= hi")
        return v


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "scenario"
    grid: GridDocument
    n_cities: int = Field(default=2, ge=1)
    trains: list[TimetableEntry]
    config: EpisodeConfig = EpisodeConfig()
    beta: float = Field(default_factory=lambda: settings.HORIZON_BETA)
    t_max: Optional[int] = Field(default=None, ge=1)  # явное переопределение горизонта
    level: Optional[int] = None
    speed_profile: str = "constant"

    _rail_grid: RailGrid | None = PrivateAttr(default=None)

    @model_validator(mode="after")
    def _check_ids(self):
        ids = [t.train for t in self.trains]
        if ids != list(range(len(ids))):
            raise ValueError("train ids must be 0..n-1 in order")
        return self

    @property
    def rail_grid(self) -> RailGrid:
        if self._rail_grid is None:
            self._rail_grid = RailGrid.from_dict(self.grid.model_dump())
        return self._rail_grid

    @property
    def n_trains(self) -> int:
        return len(self.trains)

    @property
    def map_hash(self) -> str:
        return self.rail_grid.map_hash

    def check(self) -> None:
        """Проверки, требующие сети: станции, направления, горизонт"""
        grid = self.rail_grid
        station_cells = {s.cell for s in grid.stations}
        t_max = horizon(self)
        for entry in self.trains:
            origin = tuple(entry.origin)
            if origin not in station_cells:
                raise ScenarioError(f"train {entry.train}: origin {origin} is not a station")
            if tuple(entry.target) not in station_cells:
                raise ScenarioError(f"train {entry.train}: target {entry.target} is not a station")
            if origin == tuple(entry.target):
                raise ScenarioError(f"train {entry.train}: origin equals target")
            if not allowed_exits(grid, origin, Heading(entry.origin_heading)):
                raise ScenarioError(f"train {entry.train}: origin heading has no exit")
            if entry.scheduled_arrival > t_max:
                raise ScenarioError(f"train {entry.train}: scheduled arrival beyond T_max={t_max}")

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Scenario":
        try:
            return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise ScenarioError(f"cannot load scenario {path}: {e}") from e


def horizon(scenario: Scenario) -> int:
    if scenario.t_max is not None:
        return scenario.t_max
    if scenario.beta <= 0:
        raise ScenarioError("horizon beta must be positive")
    grid = scenario.grid
    span = grid.width + grid.height + scenario.n_trains / max(scenario.n_cities, 1)
    return math.ceil(scenario.beta * span)


class LevelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    level: int
    n_trains: int = Field(..., ge=1)
    width: int
    height: int
    n_cities: int = Field(..., ge=2)
    malfunction_rate: float = Field(..., ge=0, le=1)
    malfunction_duration: tuple[int, int] = (20, 50)
    speed_profile: str = "constant"
    custom: bool = False
