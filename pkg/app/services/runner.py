# Прогон эпизодов: контроллер или исполнитель планов -> трасса; повтор трассы
import json
import logging
from dataclasses import dataclass
from typing import Optional, Protocol

from app.config import settings
from app.core.errors import TraceError
from app.core.routing import detect_deadlocks
from app.core.simulator import RawAction, SimState, active_count, reset, step
from app.schemas.control import ControllerConfig, preset
from app.schemas.scenario import Scenario
from app.schemas.trace import TRACE_VERSION, TickRecord, Trace, TraceFooter, TraceHeader
from app.services.control import DecisionController
from app.services.observations import LAYOUT_VERSION

logger = logging.getLogger(__name__)


class Driver(Protocol):
    def control_step(self, state: SimState) -> dict[int, RawAction]: ...


def cycle_policy(scenario: Scenario) -> str:
    return "reject-all" if scenario.config.reject_cycles else "rotate-3plus"


def make_driver(
    scenario: Scenario,
    method: str,
    seed: int,
    *,
    budget: int | None = None,
    conflict_window: int | None = None,
    stop_window: int | None = None,
    record: bool = False,
) -> tuple[Driver, Optional[ControllerConfig]]:
    if method == "pp":
        from app.services.baselines import PlanExecutor
        return PlanExecutor(scenario, seed=seed), None
    config = preset(method, conflict_window=conflict_window, stop_window=stop_window, budget=budget)
    return DecisionController(scenario, config, seed, record=record), config


def run_episode(
    scenario: Scenario,
    driver: Driver,
    seed: int,
    controller_name: str,
    controller_config: ControllerConfig | None = None,
    knobs: dict | None = None,
) -> Trace:
    from app.services.evaluation import metrics_from_records

    state = reset(scenario, seed)
    header = TraceHeader(
        scenario=scenario,
        map_hash=scenario.map_hash,
        seed=seed,
        method=controller_name,
        controller=controller_config.model_dump() if controller_config else None,
        t_max=state.t_max,
        cycle_policy=cycle_policy(scenario),
        layout_version=LAYOUT_VERSION,
        knobs={
            "beta": scenario.beta,
            "conflict_window": settings.CONFLICT_WINDOW,
            "stop_window": settings.STOP_WINDOW,
            "top_k": settings.TOP_K,
            **(knobs or {}),
        },
    )
    ticks: list[TickRecord] = []
    n = len(state.trains)
    observe = getattr(driver, "observe", None)
    while not state.done:
        joint = driver.control_step(state)
        actions = [int(joint.get(i, RawAction.NOOP)) for i in range(n)]
        state, events = step(state, joint)
        if observe is not None:
            observe(state, events)
        ticks.append(TickRecord(
            t=events.clock,
            actions=actions,
            events=events.to_records(),
            active=active_count(state),
            deadlocked=sorted(detect_deadlocks(state.grid, state)),
        ))
    metrics = metrics_from_records(header, ticks)
    stats = driver.stats.to_dict() if hasattr(driver, "stats") else {"replans": getattr(driver, "replans", 0)}
    trace = Trace(
        header=header,
        ticks=ticks,
        footer=TraceFooter(ticks=len(ticks), metrics=metrics.model_dump(), decision_stats=stats),
    )
    logger.debug(
        f"Эпизод {scenario.name} ({controller_name}, seed={seed}): "
        f"успех {metrics.success}/{metrics.n_trains}, блокировки {metrics.deadlock}"
    )
    return trace


def run_method(
    scenario: Scenario,
    method: str,
    seed: int,
    *,
    budget: int | None = None,
    conflict_window: int | None = None,
    stop_window: int | None = None,
) -> Trace:
    driver, config = make_driver(
        scenario, method, seed, budget=budget, conflict_window=conflict_window, stop_window=stop_window,
    )
    knobs = {}
    if config is not None and config.mapf.name in ("heuristic", "mcts"):
        knobs["conflict_window"] = config.mapf.params.get("conflict_window", settings.CONFLICT_WINDOW)
        knobs["stop_window"] = config.mapf.params.get("stop_window", settings.STOP_WINDOW)
    if config is not None and config.mapf.name == "mcts":
        knobs["mcts_budget"] = config.mapf.params.get("budget")
    return run_episode(scenario, driver, seed, method, config, knobs)


# --- повтор ----------------------------------------------------------------

@dataclass
class ReplayVerdict:
    ok: bool
    ticks: int
    divergent_tick: Optional[int] = None
    detail: str = ""


def _canonical(records) -> str:
    return json.dumps(records, separators=(",", ":"))


def replay(trace: Trace) -> ReplayVerdict:
    """Пересимуляция по (сценарий, seed) с записанными действиями; сравнение событий"""
    header = trace.header
    if header.version != TRACE_VERSION:
        raise TraceError(f"trace version {header.version!r} is not {TRACE_VERSION!r}")
    if header.layout_version != LAYOUT_VERSION:
        raise TraceError(f"observation layout {header.layout_version!r} is not {LAYOUT_VERSION!r}")
    if header.cycle_policy != cycle_policy(header.scenario):
        raise TraceError("cycle policy in header does not match the scenario")

    state = reset(header.scenario, header.seed)
    for record in trace.ticks:
        if state.done:
            return ReplayVerdict(False, record.t, record.t, "episode ended before the recorded trace")
        joint = {i: RawAction(a) for i, a in enumerate(record.actions)}
        state, events = step(state, joint)
        if _canonical(events.to_records()) != _canonical(record.events):
            return ReplayVerdict(False, record.t, record.t, f"events differ at tick {record.t}")
    if not state.done:
        return ReplayVerdict(False, len(trace.ticks), len(trace.ticks), "trace ends before the episode")
    return ReplayVerdict(True, len(trace.ticks))
