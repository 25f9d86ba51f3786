# Метрики эпизодов, прогоны уровней, концентрация поездов, гистограммы действий
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from app.config import settings
from app.core.errors import RailflowError, TraceError
from app.core.simulator import RawAction
from app.schemas.control import ABLATION_PRESETS
from app.schemas.metrics import (
    REPORT_METRICS,
    BenchmarkReport,
    EpisodeMetrics,
    LevelReport,
    MetricSummary,
)
from app.schemas.scenario import LevelSpec
from app.schemas.trace import TickRecord, Trace, TraceHeader

logger = logging.getLogger(__name__)

CONTEXTS = ("off_map", "on_map", "finished")


# --- метрики эпизода --------------------------------------------------------

def metrics_from_records(header: TraceHeader, ticks: list[TickRecord]) -> EpisodeMetrics:
    scenario = header.scenario
    n = scenario.n_trains
    t_max = header.t_max
    context = ["off_map"] * n
    histogram = {c: {a.name: 0 for a in RawAction} for c in CONTEXTS}
    dispatched: dict[int, int] = {}
    arrived: dict[int, int] = {}
    deadlocked: set[int] = set()
    series: list[int] = []

    for record in ticks:
        for train, action in enumerate(record.actions):
            histogram[context[train]][RawAction(action).name] += 1
        for train, kind, value in record.events:
            if kind == "dispatch":
                dispatched[train] = record.t
                context[train] = "on_map"
            elif kind == "arrive":
                arrived[train] = value
                context[train] = "finished"
            elif kind == "cancel":
                context[train] = "finished"
        deadlocked.update(record.deadlocked)
        series.append(record.active)

    deadlocked -= set(arrived)
    cancelled = n - len(dispatched)
    other = n - len(arrived) - len(deadlocked) - cancelled
    delays = []
    for train in dispatched:
        sched = scenario.trains[train].scheduled_arrival
        actual = arrived.get(train, t_max)
        delays.append(max(0, actual - sched))

    return EpisodeMetrics(
        n_trains=n,
        t_max=t_max,
        success=len(arrived),
        deadlock=len(deadlocked),
        cancelled=cancelled,
        other=other,
        success_rate=len(arrived) / n,
        deadlock_rate=len(deadlocked) / n,
        cancelled_rate=cancelled / n,
        other_rate=other / n,
        arrival_delay=float(np.mean(delays)) if delays else 0.0,
        active_series=series,
        peak_active=max(series, default=0),
        earliest_departure=min(dispatched.values(), default=None),
        latest_arrival=max(arrived.values(), default=None),
        action_histogram=histogram,
    )


def compute_metrics(trace: Trace) -> EpisodeMetrics:
    if trace.footer is None or trace.footer.ticks != len(trace.ticks):
        raise TraceError("trace is truncated: footer missing or tick count mismatch")
    if trace.ticks and any(r.t != i for i, r in enumerate(trace.ticks)):
        raise TraceError("trace ticks are not contiguous")
    return metrics_from_records(trace.header, trace.ticks)


# --- агрегирование ----------------------------------------------------------

def confidence_halfwidth(values: Iterable[float], confidence: float = 0.95) -> float:
    """Полуширина доверительного интервала Стьюдента"""
    arr = np.asarray(list(values), dtype=float)
    if arr.size < 2:
        return 0.0
    sem = arr.std(ddof=1) / math.sqrt(arr.size)
    return float(stats.t.ppf(0.5 + confidence / 2, arr.size - 1) * sem)


def summarize(episodes: list[EpisodeMetrics]) -> dict[str, MetricSummary]:
    out = {}
    for metric in REPORT_METRICS:
        values = [float(getattr(m, metric)) for m in episodes]
        out[metric] = MetricSummary(
            mean=float(np.mean(values)) if values else 0.0,
            ci95=confidence_halfwidth(values),
            n=len(values),
        )
    return out


def _episode_job(args) -> tuple[int, Optional[Trace], Optional[str]]:
    from app.services.levels import build_scenario
    from app.services.runner import run_method

    spec, method, seed, options = args
    try:
        scenario = build_scenario(spec, seed, beta=options.get("beta"))
        trace = run_method(
            scenario, method, seed,
            budget=options.get("budget"),
            conflict_window=options.get("conflict_window"),
            stop_window=options.get("stop_window"),
        )
    except RailflowError as e:
        return seed, None, f"seed {seed}: {e}"
    return seed, trace, None


def run_episodes(spec: LevelSpec, method: str, seeds: list[int], options: dict | None = None,
                 threads: int | None = None, progress: bool = True,
                 keep_failures: bool = False) -> list[tuple[int, Optional[Trace], Optional[str]]]:
    """Независимые эпизоды (параллельно при threads > 1); результат упорядочен по seed"""
    options = options or {}
    threads = threads or settings.THREADS
    jobs = [(spec, method, seed, options) for seed in seeds]
    desc = f"level {spec.level} / {method}"
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(tqdm(pool.map(_episode_job, jobs), total=len(jobs), desc=desc, disable=not progress))
    else:
        results = [_episode_job(job) for job in tqdm(jobs, desc=desc, disable=not progress)]
    for _, _, error in results:
        if error is None:
            continue
        logger.error(f"❌ {method}, уровень {spec.level}: {error}")
        if not keep_failures:
            raise RailflowError(f"{method} on level {spec.level} failed: {error}")
    return sorted(results, key=lambda item: item[0])


def run_level(spec: LevelSpec, method: str, seeds: list[int], options: dict | None = None,
              threads: int | None = None, config_hash: str = "", progress: bool = True) -> tuple[LevelReport, list[Trace]]:
    results = run_episodes(spec, method, seeds, options, threads, progress)
    traces = [trace for _, trace, _ in results]
    episodes = [compute_metrics(trace) for trace in traces]
    report = LevelReport(
        level=spec.level, method=method, seeds=list(seeds), config_hash=config_hash,
        summary=summarize(episodes), episodes=episodes,
    )
    logger.info(
        f"✅ Уровень {spec.level}, {method}: успех {report.summary['success_rate'].mean:.3f} "
        f"± {report.summary['success_rate'].ci95:.3f}, блокировки {report.summary['deadlock_rate'].mean:.3f}"
    )
    return report, traces


def report_from_traces(level: int, method: str, traces: list[Trace], config_hash: str = "") -> LevelReport:
    traces = sorted(traces, key=lambda t: t.header.seed)
    episodes = [compute_metrics(t) for t in traces]
    return LevelReport(
        level=level, method=method, seeds=[t.header.seed for t in traces], config_hash=config_hash,
        summary=summarize(episodes), episodes=episodes,
    )


# --- концентрация и гистограммы --------------------------------------------

@dataclass
class ConcurrencySummary:
    series: pd.DataFrame            # tick, mean, ci95
    windows: list[Optional[int]]    # последнее прибытие − первое отправление по эпизодам
    peak: float
    episode_lengths: list[int]


def concurrency_trace(traces: list[Trace]) -> ConcurrencySummary:
    if not traces:
        raise TraceError("concurrency trace needs at least one trace")
    length = max(len(t.ticks) for t in traces)
    # после окончания эпизода активных поездов нет
    matrix = np.zeros((len(traces), length))
    windows = []
    for i, trace in enumerate(traces):
        series = [r.active for r in trace.ticks]
        matrix[i, : len(series)] = series
        windows.append(metrics_from_records(trace.header, trace.ticks).operational_window)
    mean = matrix.mean(axis=0)
    band = np.array([confidence_halfwidth(matrix[:, j]) for j in range(length)]) if len(traces) > 1 else np.zeros(length)
    frame = pd.DataFrame({"tick": np.arange(length), "mean": mean, "ci95": band})
    return ConcurrencySummary(frame, windows, float(mean.max(initial=0.0)), [len(t.ticks) for t in traces])


def concurrency_by_profile(spec: LevelSpec, profiles: list[str], seeds: list[int], method: str = "pp",
                           options: dict | None = None, threads: int | None = None,
                           progress: bool = True) -> dict[str, ConcurrencySummary]:
    """Один уровень под разными профилями скоростей (постоянная против дробной)"""
    out = {}
    for profile in profiles:
        variant = spec.model_copy(update={"speed_profile": profile})
        results = run_episodes(variant, method, seeds, options, threads, progress)
        out[profile] = concurrency_trace([trace for _, trace, _ in results])
        logger.info(f"Профиль {profile}: пик {out[profile].peak:.1f}, средняя длина "
                    f"{np.mean(out[profile].episode_lengths):.1f}")
    return out


@dataclass
class ActionHistogram:
    counts: dict[str, dict[str, int]]
    departures_share: Optional[float]

    @property
    def total(self) -> int:
        return sum(sum(c.values()) for c in self.counts.values())

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"context": ctx, "action": action, "count": count}
            for ctx, actions in self.counts.items() for action, count in actions.items()
        ]
        return pd.DataFrame(rows)


def action_histogram(traces: list[Trace]) -> ActionHistogram:
    counts = {c: {a.name: 0 for a in RawAction} for c in CONTEXTS}
    for trace in traces:
        hist = metrics_from_records(trace.header, trace.ticks).action_histogram
        for ctx, actions in hist.items():
            for action, count in actions.items():
                counts[ctx][action] += count
    forward = sum(counts[c]["FORWARD"] for c in CONTEXTS)
    departures = counts["off_map"]["FORWARD"]
    share = departures / forward if forward else None
    return ActionHistogram(counts, share)


# --- абляция и отчёты -------------------------------------------------------

def ablation_suite(levels: list[LevelSpec], seeds: list[int], options: dict | None = None,
                   threads: int | None = None, progress: bool = True) -> BenchmarkReport:
    """Одинаковые сценарии и seed для полной иерархии и её жадных замен"""
    report = BenchmarkReport()
    for spec in levels:
        for method in ABLATION_PRESETS:
            level_report, _ = run_level(spec, method, seeds, options, threads, progress=progress)
            report.reports.append(level_report)
    return report


def write_report(report: BenchmarkReport, out_dir: Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    json_path = out_dir / "report.json"
    pd.DataFrame(report.rows(), columns=["level", "method", "metric", "mean", "ci95", "n", "config_hash"]).to_csv(
        csv_path, index=False,
    )
    json_path.write_text(report.model_dump_json(indent=1), encoding="utf-8")
    return csv_path, json_path


def write_concurrency(summary: ConcurrencySummary, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary.series.to_csv(path, index=False)
    return path


def write_concurrency_profiles(summaries: dict[str, ConcurrencySummary], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = [s.series.assign(profile=profile) for profile, s in summaries.items()]
    pd.concat(frames, ignore_index=True)[["profile", "tick", "mean", "ci95"]].to_csv(path, index=False)
    return path
