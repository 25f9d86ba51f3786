import pandas as pd
import pytest

from app.core.errors import TraceError
from app.schemas.metrics import BenchmarkReport, EpisodeMetrics
from app.services.evaluation import (
    ablation_suite,
    action_histogram,
    compute_metrics,
    concurrency_by_profile,
    concurrency_trace,
    confidence_halfwidth,
    report_from_traces,
    write_concurrency_profiles,
    write_report,
)
from app.services.levels import level_spec
from app.services.results import ResultStore
from app.services.runner import run_method
from builders import E, W, corridor, scenario_from, train


def _late_lone_trace(seed=0):
    scenario = scenario_from(corridor(10), [train((0, 1), E, (0, 8), sched=5)])
    return run_method(scenario, "full", seed)


def _head_on_trace(method):
    scenario = scenario_from(corridor(10), [
        train((0, 1), E, (0, 8)),
        train((0, 8), W, (0, 1), ed=2),
    ])
    return run_method(scenario, method, 0)


def test_outcomes_must_partition_trains():
    with pytest.raises(ValueError):
        EpisodeMetrics(
            n_trains=3, t_max=10, success=1, deadlock=1, cancelled=0, other=0,
            success_rate=1 / 3, deadlock_rate=1 / 3, cancelled_rate=0, other_rate=0, arrival_delay=0,
        )


def test_confidence_halfwidth():
    assert confidence_halfwidth([]) == 0.0
    assert confidence_halfwidth([0.4]) == 0.0
    assert confidence_halfwidth([1.0, 1.0, 1.0]) == 0.0
    # t(0.975, 2) * 1 / sqrt(3)
    assert confidence_halfwidth([1.0, 2.0, 3.0]) == pytest.approx(2.4841, rel=1e-3)


def test_metrics_of_late_arrival():
    trace = _late_lone_trace()
    m = compute_metrics(trace)
    assert (m.success, m.deadlock, m.cancelled, m.other) == (1, 0, 0, 0)
    assert m.arrival_delay == 3
    assert m.earliest_departure == 0
    assert m.latest_arrival == 8
    assert m.operational_window == 8
    assert m.peak_active == 1
    assert m.active_series[-1] == 0


def test_deadlocked_trains_are_counted():
    m = compute_metrics(_head_on_trace("greedy"))
    assert m.deadlock == 2
    assert m.success == 0
    assert m.deadlock_rate == 1.0


def test_truncated_trace_is_rejected():
    trace = _late_lone_trace()
    with pytest.raises(TraceError):
        compute_metrics(trace.model_copy(update={"footer": None}))
    with pytest.raises(TraceError):
        compute_metrics(trace.model_copy(update={"ticks": trace.ticks[:-1]}))


def test_action_histogram_covers_every_tick():
    traces = [_head_on_trace("full"), _head_on_trace("greedy")]
    hist = action_histogram(traces)
    assert hist.total == sum(len(t.ticks) * 2 for t in traces)
    assert hist.counts["off_map"]["FORWARD"] == 4
    assert 0 < hist.departures_share < 1
    frame = hist.to_frame()
    assert set(frame["context"]) == {"off_map", "on_map", "finished"}
    assert frame["count"].sum() == hist.total


def test_concurrency_trace_pads_finished_episodes():
    short, long_ = _late_lone_trace(), _head_on_trace("full")
    summary = concurrency_trace([short, long_])
    assert len(summary.series) == max(len(short.ticks), len(long_.ticks))
    assert summary.series["mean"].iloc[-1] == 0.0
    assert summary.peak == pytest.approx(1.0)
    assert summary.windows[0] == 8
    with pytest.raises(TraceError):
        concurrency_trace([])


def test_reports_are_written(tmp_path):
    traces = [_late_lone_trace(seed) for seed in (1, 0)]
    level = report_from_traces(0, "full", traces, config_hash="abc")
    assert level.seeds == [0, 1]
    assert level.summary["success_rate"].mean == 1.0
    assert level.summary["success_rate"].ci95 == 0.0

    csv_path, json_path = write_report(BenchmarkReport(reports=[level]), tmp_path)
    frame = pd.read_csv(csv_path)
    assert list(frame.columns) == ["level", "method", "metric", "mean", "ci95", "n", "config_hash"]
    assert set(frame["metric"]) >= {"success_rate", "deadlock_rate", "arrival_delay"}
    assert BenchmarkReport.model_validate_json(json_path.read_text()).reports[0].method == "full"

    profiles = {"constant": concurrency_trace(traces)}
    path = write_concurrency_profiles(profiles, tmp_path / "profiles.csv")
    assert list(pd.read_csv(path).columns) == ["profile", "tick", "mean", "ci95"]


def test_result_store_keeps_only_finished_cells(tmp_path):
    store = ResultStore(db_url=f"sqlite:///{tmp_path / 'results.sqlite'}")
    metrics = compute_metrics(_late_lone_trace())
    assert store.get(0, "full", 0, "abc") is None

    store.put(0, "full", 0, "abc", metrics=metrics, trace_path=tmp_path / "seed0.jsonl")
    store.put(0, "full", 1, "abc", error="seed 1: boom")
    assert store.get(0, "full", 0, "abc") == metrics
    assert store.get(0, "full", 0, "other") is None
    assert store.get(0, "full", 1, "abc") is None
    assert store.trace_path(0, "full", 0, "abc") == tmp_path / "seed0.jsonl"
    assert store.failed_seeds(0, "full", "abc") == [1]

    # повторная запись заменяет строку
    store.put(0, "full", 1, "abc", metrics=metrics)
    assert store.failed_seeds(0, "full", "abc") == []
    assert store.summary() == {"total": 2, "failed": 0}


def test_full_hierarchy_beats_greedy_replacement():
    report = ablation_suite([level_spec(2)], seeds=list(range(8)), threads=1, progress=False)
    by_method = {r.method: r for r in report.reports}
    assert {"full", "greedy"} <= set(by_method)
    full, greedy = by_method["full"], by_method["greedy"]
    success = lambda r: sum(e.success_rate for e in r.episodes)  # noqa: E731
    deadlock = lambda r: sum(e.deadlock_rate for e in r.episodes)  # noqa: E731
    assert success(full) >= success(greedy)
    assert deadlock(full) <= deadlock(greedy)


def test_constant_speed_peaks_at_least_as_high_as_fractional():
    profiles = concurrency_by_profile(
        level_spec(4), ["constant", "fractional:1,0.5"], seeds=list(range(4)),
        method="pp", threads=1, progress=False,
    )
    assert profiles["constant"].peak >= profiles["fractional:1,0.5"].peak
