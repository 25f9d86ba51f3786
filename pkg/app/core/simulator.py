# Дискретная модель эпизода: отправление, движение, неисправности, горизонт
import copy
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction
from typing import NamedTuple, Optional, Union

import numpy as np

from app.config import settings
from app.core.errors import SimulationError
from app.core.rail import Cell, Heading, Pose, RailGrid, allowed_exits, neighbour
from app.schemas.scenario import Scenario, horizon

logger = logging.getLogger(__name__)


class RawAction(IntEnum):
    NOOP = 0
    STOP = 1
    FORWARD = 2
    LEFT = 3
    RIGHT = 4


class TrainStatus(IntEnum):
    WAITING_OFF_MAP = 0
    READY_OFF_MAP = 1
    ACTIVE = 2
    ARRIVED = 3
    CANCELLED_AT_END = 4

    @property
    def off_map(self) -> bool:
        return self in (TrainStatus.WAITING_OFF_MAP, TrainStatus.READY_OFF_MAP)

    @property
    def terminal(self) -> bool:
        return self in (TrainStatus.ARRIVED, TrainStatus.CANCELLED_AT_END)


class TrainEvent(NamedTuple):
    train: int
    kind: str
    value: Union[int, str, list, None] = None


@dataclass
class StepEvents:
    clock: int
    events: list[TrainEvent] = field(default_factory=list)

    def add(self, train: int, kind: str, value=None) -> None:
        self.events.append(TrainEvent(train, kind, value))

    def of_kind(self, kind: str) -> list[TrainEvent]:
        return [e for e in self.events if e.kind == kind]

    def to_records(self) -> list[list]:
        return [[e.train, e.kind, e.value] for e in self.events]


@dataclass
class TrainState:
    train: int
    status: TrainStatus = TrainStatus.WAITING_OFF_MAP
    cell: Optional[Cell] = None
    heading: Optional[Heading] = None
    progress: Fraction = Fraction(0)
    malfunction: int = 0
    moving: bool = False
    last_action: RawAction = RawAction.FORWARD
    departed: Optional[int] = None
    arrived: Optional[int] = None

    @property
    def pose(self) -> Optional[Pose]:
        if self.cell is None:
            return None
        return Pose(self.cell, self.heading)


@dataclass
class SimState:
    scenario: Scenario
    t_max: int
    clock: int
    trains: list[TrainState]
    rng: np.random.Generator
    done: bool = False

    @property
    def grid(self) -> RailGrid:
        return self.scenario.rail_grid

    def occupancy(self) -> dict[Cell, int]:
        return {t.cell: t.train for t in self.trains if t.status == TrainStatus.ACTIVE}

    def remaining(self) -> int:
        return self.t_max - self.clock


@dataclass(frozen=True)
class SimSnapshot:
    """Неизменяемый слепок: копируется состояние, не история"""
    scenario: Scenario
    t_max: int
    clock: int
    trains: tuple
    rng_state: dict
    done: bool


# --- жизненный цикл эпизода -------------------------------------------------

def reset(scenario: Scenario, seed: int) -> SimState:
    scenario.check()
    trains = [TrainState(train=e.train) for e in scenario.trains]
    state = SimState(
        scenario=scenario,
        t_max=horizon(scenario),
        clock=0,
        trains=trains,
        rng=np.random.default_rng(seed),
    )
    logger.debug(f"reset: {scenario.name}, поездов {len(trains)}, T_max={state.t_max}, seed={seed}")
    return state


def active_count(state: SimState) -> int:
    return sum(1 for t in state.trains if t.status == TrainStatus.ACTIVE)


def snapshot(state: SimState) -> SimSnapshot:
    return SimSnapshot(
        scenario=state.scenario,
        t_max=state.t_max,
        clock=state.clock,
        trains=tuple(copy.copy(t) for t in state.trains),
        rng_state=copy.deepcopy(state.rng.bit_generator.state),
        done=state.done,
    )


def restore(token: SimSnapshot) -> SimState:
    rng = np.random.default_rng()
    rng.bit_generator.state = copy.deepcopy(token.rng_state)
    return SimState(
        scenario=token.scenario,
        t_max=token.t_max,
        clock=token.clock,
        trains=[copy.copy(t) for t in token.trains],
        rng=rng,
        done=token.done,
    )


# --- движение ---------------------------------------------------------------

def exit_for_action(grid: RailGrid, pose: Pose, action: RawAction, last_action: RawAction) -> Optional[Heading]:
    """Выход из клетки, реализующий действие; None: переход недопустим"""
    exits = allowed_exits(grid, pose.cell, pose.heading)
    if action == RawAction.NOOP:
        if len(exits) == 1:
            return next(iter(exits))
        action = last_action
    h = pose.heading
    wanted = {RawAction.FORWARD: h, RawAction.LEFT: h.left(), RawAction.RIGHT: h.right()}.get(action)
    if wanted in exits:
        return wanted
    if action == RawAction.FORWARD and len(exits) == 1:
        return next(iter(exits))
    return None


def resolve_motion(state: SimState, intents: dict[int, Cell]) -> set[int]:
    """Принимает ходы, чья цель свободна или освобождается принятым ходом.

    Спор за клетку решается в пользу меньшего номера, циклические
    зависимости (включая обмен местами) отклоняются целиком.
    """
    grid = state.grid
    occupant = state.occupancy()
    trains = state.trains

    valid: dict[int, Cell] = {}
    for tid, target in intents.items():
        pose = trains[tid].pose
        if pose is None:
            continue
        reachable = {neighbour(pose.cell, h) for h in allowed_exits(grid, pose.cell, pose.heading)}
        if target in reachable:
            valid[tid] = target

    contenders: dict[Cell, list[int]] = defaultdict(list)
    for tid, target in valid.items():
        contenders[target].append(tid)
    winners = {min(tids): target for target, tids in contenders.items()}

    result: dict[int, bool] = {}
    for start in sorted(winners):
        if start in result:
            continue
        path: list[int] = []
        on_path: set[int] = set()
        cur = start
        verdict: Optional[bool] = None
        while verdict is None:
            path.append(cur)
            on_path.add(cur)
            occ = occupant.get(winners[cur])
            if occ is None:
                verdict = True
            elif occ not in winners:
                verdict = False
            elif occ in result:
                verdict = result[occ]
            elif occ in on_path:
                cycle = path[path.index(occ):]
                rotate = not state.scenario.config.reject_cycles and len(cycle) >= 3
                for tid in cycle:
                    result[tid] = rotate
                path = path[:path.index(occ)]
                verdict = rotate
            else:
                cur = occ
        for tid in path:
            result.setdefault(tid, verdict)
    return {tid for tid, ok in result.items() if ok}


def step(state: SimState, joint: dict[int, RawAction]) -> tuple[SimState, StepEvents]:
    """Один такт эпизода; состояние изменяется на месте и возвращается"""
    if state.done or state.clock >= state.t_max:
        raise SimulationError(f"episode already finished at clock {state.clock}")

    scenario = state.scenario
    grid = state.grid
    cfg = scenario.config
    events = StepEvents(clock=state.clock)

    for t in state.trains:
        entry = scenario.trains[t.train]
        if t.status == TrainStatus.WAITING_OFF_MAP and state.clock >= entry.earliest_departure:
            t.status = TrainStatus.READY_OFF_MAP
            events.add(t.train, "ready")

    # (1) неисправности: выборка и обратный отсчёт
    frozen: set[int] = set()
    lo, hi = cfg.malfunction_duration
    for t in state.trains:
        if t.status.terminal:
            continue
        if t.malfunction == 0 and cfg.malfunction_rate > 0:
            if state.rng.random() < cfg.malfunction_rate:
                t.malfunction = int(state.rng.integers(lo, hi + 1))
                events.add(t.train, "malfunction_start", t.malfunction)
        if t.malfunction > 0:
            frozen.add(t.train)
            t.malfunction -= 1
            if t.malfunction == 0:
                events.add(t.train, "malfunction_end")

    # (3) намерения движения активных поездов
    intents: dict[int, Cell] = {}
    exits: dict[int, Heading] = {}
    for t in state.trains:
        if t.status != TrainStatus.ACTIVE or t.train in frozen:
            continue
        action = RawAction(joint.get(t.train, RawAction.NOOP))
        if action == RawAction.STOP:
            t.moving = False
            continue
        if action == RawAction.NOOP and not t.moving:
            continue
        if action != RawAction.NOOP:
            t.moving = True
            t.last_action = action
        speed = scenario.trains[t.train].speed_fraction
        t.progress = min(Fraction(1), t.progress + speed)
        if t.progress < 1:
            continue
        out = exit_for_action(grid, t.pose, action, t.last_action)
        if out is None:
            events.add(t.train, "reject", "invalid_transition")
            continue
        intents[t.train] = neighbour(t.cell, out)
        exits[t.train] = out

    accepted = resolve_motion(state, intents)
    for tid in sorted(intents):
        t = state.trains[tid]
        if tid in accepted:
            t.cell, t.heading = intents[tid], exits[tid]
            t.progress -= 1
            events.add(tid, "move", [t.cell[0], t.cell[1], int(t.heading)])
        else:
            events.add(tid, "reject", "blocked")

    # (2) отправление: клетка отправления свободна после разрешения движения
    occupied = set(state.occupancy())
    for t in state.trains:
        if t.status != TrainStatus.READY_OFF_MAP or t.train in frozen:
            continue
        if RawAction(joint.get(t.train, RawAction.NOOP)) != RawAction.FORWARD:
            continue
        entry = scenario.trains[t.train]
        origin = tuple(entry.origin)
        if origin in occupied:
            events.add(t.train, "dispatch_blocked")
            continue
        t.status = TrainStatus.ACTIVE
        t.cell, t.heading = origin, Heading(entry.origin_heading)
        t.progress = Fraction(0)
        t.moving = True
        t.last_action = RawAction.FORWARD
        t.departed = state.clock
        occupied.add(origin)
        events.add(t.train, "dispatch")

    # (4) прибытие: поезд покидает сеть в том же такте
    for tid in sorted(accepted):
        t = state.trains[tid]
        if t.cell == tuple(scenario.trains[tid].target):
            t.status = TrainStatus.ARRIVED
            t.arrived = state.clock + 1
            t.cell, t.heading = None, None
            t.moving = False
            events.add(tid, "arrive", t.arrived)

    # (5) часы
    state.clock += 1
    if state.clock >= state.t_max or all(t.status == TrainStatus.ARRIVED for t in state.trains):
        state.done = True
        for t in state.trains:
            if t.status.off_map:
                t.status = TrainStatus.CANCELLED_AT_END
                events.add(t.train, "cancel")

    if settings.DEBUG_CHECKS:
        check_occupancy(state)
    return state, events


def check_occupancy(state: SimState) -> None:
    cells = [t.cell for t in state.trains if t.status == TrainStatus.ACTIVE]
    if len(cells) != len(set(cells)):
        raise SimulationError(f"occupancy violated at clock {state.clock}")
    for cell in cells:
        if not state.grid.is_rail(cell):
            raise SimulationError(f"active train on non-rail cell {cell}")
