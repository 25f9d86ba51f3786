# Метрики эпизода и отчёты бенчмарка
from typing import Optional

from pydantic import BaseModel, Field, model_validator

RATE_METRICS = ("success_rate", "deadlock_rate", "cancelled_rate", "other_rate")
REPORT_METRICS = RATE_METRICS + ("arrival_delay", "peak_active")


class EpisodeMetrics(BaseModel):
    n_trains: int
    t_max: int
    success: int
    deadlock: int
    cancelled: int
    other: int
    success_rate: float = Field(..., ge=0, le=1)
    deadlock_rate: float = Field(..., ge=0, le=1)
    cancelled_rate: float = Field(..., ge=0, le=1)
    other_rate: float = Field(..., ge=0, le=1)
    arrival_delay: float = Field(..., ge=0)
    active_series: list[int] = Field(default_factory=list)
    peak_active: int = 0
    earliest_departure: Optional[int] = None
    latest_arrival: Optional[int] = None
    action_histogram: dict[str, dict[str, int]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _partition(self):
        if self.success + self.deadlock + self.cancelled + self.other != self.n_trains:
            raise ValueError("outcome counts must partition the trains")
        if self.arrival_delay > self.t_max:
            raise ValueError("arrival delay exceeds the horizon")
        return self

    @property
    def operational_window(self) -> Optional[int]:
        if self.earliest_departure is None or self.latest_arrival is None:
            return None
        return self.latest_arrival - self.earliest_departure


class MetricSummary(BaseModel):
    mean: float
    ci95: float
    n: int


class LevelReport(BaseModel):
    level: int
    method: str
    seeds: list[int]
    config_hash: str
    summary: dict[str, MetricSummary]
    episodes: list[EpisodeMetrics] = Field(default_factory=list)
    failed: list[int] = Field(default_factory=list)


class BenchmarkReport(BaseModel):
    reports: list[LevelReport] = Field(default_factory=list)

    def rows(self) -> list[dict]:
        rows = []
        for r in self.reports:
            for metric, s in r.summary.items():
                rows.append({
                    "level": r.level, "method": r.method, "metric": metric,
                    "mean": s.mean, "ci95": s.ci95, "n": s.n, "config_hash": r.config_hash,
                })
        return rows
