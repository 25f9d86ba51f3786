# Базовые методы: приоритетное планирование с таблицей резервирования,
# исполнение планов с перепланированием и политика избегания блокировок
import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from app.config import settings
from app.core.errors import SimulationError
from app.core.rail import Cell, Heading, Pose, allowed_exits, neighbour
from app.core.routing import Route, distance_to_target, next_decision_point, shortest_route
from app.core.simulator import RawAction, SimState, StepEvents, TrainStatus, reset
from app.schemas.scenario import Scenario
from app.services.control import relative_action
from app.services.observations import ObservationContext, is_opposing, route_view
from app.services.policies import DecisionRequest, MadsAction, MapfAction, Phase, Policy

logger = logging.getLogger(__name__)


# --- резервирование ---------------------------------------------------------

class ReservationTable:
    """(клетка, такт) -> поезд и (ребро, такт) -> поезд; двойная бронь запрещена"""

    def __init__(self, t_max: int):
        self.t_max = t_max
        self.vertex: dict[tuple[Cell, int], int] = {}
        self.edge: dict[tuple[tuple[Cell, Cell], int], int] = {}

    def holder(self, cell: Cell, tick: int) -> Optional[int]:
        return self.vertex.get((cell, tick))

    def free(self, cell: Cell, tick: int, train: int) -> bool:
        return self.vertex.get((cell, tick), train) == train

    def can_enter(self, src: Cell, dst: Cell, tick: int, train: int) -> bool:
        """Въезд в dst на такте tick (позиция в tick+1): клетка свободна в tick и tick+1,
        встречный обмен по ребру исключён"""
        return (
            self.free(dst, tick + 1, train)
            and self.free(dst, tick, train)
            and self.edge.get(((dst, src), tick), train) == train
        )

    def reserve_cell(self, cell: Cell, tick: int, train: int) -> None:
        if not 0 <= tick <= self.t_max:
            return
        holder = self.vertex.setdefault((cell, tick), train)
        if holder != train:
            raise SimulationError(f"cell {cell} at tick {tick} double-booked by {holder} and {train}")

    def reserve_edge(self, src: Cell, dst: Cell, tick: int, train: int) -> None:
        holder = self.edge.setdefault(((src, dst), tick), train)
        if holder != train:
            raise SimulationError(f"edge {src}->{dst} at tick {tick} double-booked")

    def reserve_plan(self, plan: "SpaceTimePlan") -> None:
        prev: Optional[Cell] = None
        for tick in sorted(plan.positions):
            pose = plan.positions[tick]
            if pose is None:
                prev = None
                continue
            self.reserve_cell(pose.cell, tick, plan.train)
            if prev is not None and prev != pose.cell:
                self.reserve_edge(prev, pose.cell, tick - 1, plan.train)
            prev = pose.cell
        if plan.arrival is not None and prev is not None:
            # въезд в цель занимает её на такте прибытия
            target = plan.target
            self.reserve_cell(target, plan.arrival, plan.train)
            self.reserve_edge(prev, target, plan.arrival - 1, plan.train)

    def park(self, train: int, cell: Cell, start: int) -> None:
        for tick in range(start, self.t_max + 1):
            self.reserve_cell(cell, tick, train)


@dataclass
class SpaceTimePlan:
    train: int
    target: Cell
    start: int
    actions: dict[int, RawAction] = field(default_factory=dict)
    positions: dict[int, Optional[Pose]] = field(default_factory=dict)   # поза на такте (None: вне сети)
    arrival: Optional[int] = None
    cancelled: bool = False
    parked: bool = False

    @property
    def waits(self) -> int:
        return sum(1 for a in self.actions.values() if a == RawAction.STOP)

    def action_at(self, tick: int) -> RawAction:
        if tick in self.actions:
            return self.actions[tick]
        return RawAction.STOP if self.parked else RawAction.NOOP

    def timed_poses(self) -> list[tuple[int, Cell, Heading]]:
        return [(t, p.cell, p.heading) for t, p in sorted(self.positions.items()) if p is not None]

    def to_records(self) -> dict:
        return {
            "train": self.train,
            "arrival": self.arrival,
            "cancelled": self.cancelled,
            "poses": [[t, c[0], c[1], int(h)] for t, c, h in self.timed_poses()],
        }


# --- пространственно-временной A* ----------------------------------------

OFF = None


@dataclass(frozen=True)
class _Node:
    pose: Optional[Pose]
    tick: int
    progress: Fraction


class SpaceTimeSearch:
    """A* по (поза, такт, накопленный прогресс) против таблицы резервирования"""

    def __init__(self, state: SimState, table: ReservationTable, max_expansions: int):
        self.state = state
        self.grid = state.grid
        self.table = table
        self.max_expansions = max_expansions

    def _h(self, pose: Optional[Pose], progress: Fraction, origin: Pose, target: Cell, speed: Fraction) -> float:
        if pose is None:
            d = distance_to_target(self.grid, origin, target)
            return math.inf if d is None else 1 + math.ceil(d / speed)
        d = distance_to_target(self.grid, pose, target)
        if d is None:
            return math.inf
        return max(0, math.ceil((d - progress) / speed))

    def plan(self, train: int) -> Optional[SpaceTimePlan]:
        st = self.state
        t = st.trains[train]
        entry = st.scenario.trains[train]
        target = tuple(entry.target)
        origin = entry.origin_pose
        speed = entry.speed_fraction
        frozen_until = st.clock + t.malfunction
        start = _Node(t.pose, st.clock, t.progress if t.pose is not None else Fraction(0))

        h0 = self._h(start.pose, start.progress, origin, target, speed)
        if h0 == math.inf:
            return None
        counter = itertools.count()
        frontier = [(st.clock + h0, next(counter), start)]
        parents: dict[_Node, tuple[Optional[_Node], Optional[RawAction]]] = {start: (None, None)}
        expansions = 0
        while frontier:
            _, _, node = heapq.heappop(frontier)
            expansions += 1
            if expansions > self.max_expansions:
                logger.debug(f"PP: поезд {train} превысил предел раскрытий")
                return None
            for action, nxt, arrived in self._successors(node, train, origin, target, speed, frozen_until, entry):
                if nxt in parents:
                    continue
                parents[nxt] = (node, action)
                if arrived:
                    return self._build(train, target, start, nxt, parents)
                h = self._h(nxt.pose, nxt.progress, origin, target, speed)
                if h == math.inf or nxt.tick + h > st.t_max:
                    continue
                heapq.heappush(frontier, (nxt.tick + h, next(counter), nxt))
        return None

    def _successors(self, node: _Node, train, origin, target, speed, frozen_until, entry):
        tick = node.tick
        if tick >= self.state.t_max:
            return
        table = self.table
        if node.pose is None:
            yield RawAction.NOOP, _Node(None, tick + 1, node.progress), False
            if tick >= entry.earliest_departure and tick >= frozen_until:
                if table.free(origin.cell, tick, train) and table.free(origin.cell, tick + 1, train):
                    yield RawAction.FORWARD, _Node(origin, tick + 1, Fraction(0)), False
            return

        cell = node.pose.cell
        if table.free(cell, tick + 1, train):
            yield RawAction.STOP, _Node(node.pose, tick + 1, node.progress), False
        if tick < frozen_until:
            return
        progress = min(Fraction(1), node.progress + speed)
        if progress < 1:
            if table.free(cell, tick + 1, train):
                yield RawAction.FORWARD, _Node(node.pose, tick + 1, progress), False
            return
        for out in sorted(allowed_exits(self.grid, cell, node.pose.heading)):
            nxt_cell = neighbour(cell, out)
            if not self.grid.in_bounds(nxt_cell) or not table.can_enter(cell, nxt_cell, tick, train):
                continue
            action = relative_action(node.pose, out)
            yield action, _Node(Pose(nxt_cell, out), tick + 1, progress - 1), nxt_cell == target

    def _build(self, train, target, start: _Node, goal: _Node, parents) -> SpaceTimePlan:
        chain = []
        node = goal
        while node != start:
            parent, action = parents[node]
            chain.append((parent, action))
            node = parent
        chain.reverse()
        plan = SpaceTimePlan(train, target, start.tick, arrival=goal.tick)
        for parent, action in chain:
            plan.actions[parent.tick] = action
            plan.positions[parent.tick] = parent.pose
        return plan


# --- приоритетное планирование ---------------------------------------------

def priority_order(state: SimState) -> list[int]:
    """(ранний выход, длинный маршрут первым, номер)"""
    def key(entry):
        cost = distance_to_target(state.grid, entry.origin_pose, tuple(entry.target))
        return entry.earliest_departure, -(cost if cost is not None else -1), entry.train
    return [e.train for e in sorted(state.scenario.trains, key=key)]


def plan_from_state(state: SimState, order: list[int] | None = None,
                    max_expansions: int | None = None) -> dict[int, SpaceTimePlan]:
    """Последовательное планирование всех незавершённых поездов от текущего такта.

    Активный поезд без плана остаётся на месте до конца эпизода; тогда
    проход повторяется с ним, закреплённым первым.
    """
    order = order or priority_order(state)
    max_expansions = max_expansions or settings.PP_MAX_EXPANSIONS
    pending = [tid for tid in order if not state.trains[tid].status.terminal]
    parked: list[int] = []
    while True:
        table = ReservationTable(state.t_max)
        plans: dict[int, SpaceTimePlan] = {}
        for tid in parked:
            plans[tid] = _parked_plan(state, tid, table)
        for tid in pending:
            t = state.trains[tid]
            if t.status == TrainStatus.ACTIVE:
                table.reserve_cell(t.cell, state.clock, tid)
        failed = None
        for tid in pending:
            if tid in parked:
                continue
            plan = SpaceTimeSearch(state, table, max_expansions).plan(tid)
            t = state.trains[tid]
            if plan is None and t.status == TrainStatus.ACTIVE:
                failed = tid
                break
            if plan is None:
                target = tuple(state.scenario.trains[tid].target)
                plan = SpaceTimePlan(tid, target, state.clock, cancelled=True)
                plan.positions = {tick: None for tick in range(state.clock, state.t_max + 1)}
            else:
                table.reserve_plan(plan)
            plans[tid] = plan
        if failed is None:
            return plans
        logger.debug(f"PP: активный поезд {failed} без плана, закрепляем на месте")
        parked.append(failed)


def _parked_plan(state: SimState, train: int, table: ReservationTable) -> SpaceTimePlan:
    t = state.trains[train]
    target = tuple(state.scenario.trains[train].target)
    table.park(train, t.cell, state.clock)
    plan = SpaceTimePlan(train, target, state.clock, parked=True)
    plan.positions = {tick: t.pose for tick in range(state.clock, state.t_max + 1)}
    return plan


def prioritized_plan(scenario: Scenario, seed: int = 0) -> dict[int, SpaceTimePlan]:
    state = reset(scenario, seed)
    plans = plan_from_state(state)
    cancelled = sum(1 for p in plans.values() if p.cancelled)
    logger.info(f"✅ PP: запланировано {len(plans) - cancelled}/{len(plans)}, отменено {cancelled}")
    return plans


# --- исполнение планов ------------------------------------------------------

class PlanExecutor:
    """Исполняет планы такт за тактом; при любой неисправности перепланирует всех"""

    def __init__(self, scenario: Scenario, plans: dict[int, SpaceTimePlan] | None = None, seed: int = 0):
        self.scenario = scenario
        self.plans = plans
        self.order: list[int] | None = None
        self.replans = 0
        self.seed = seed

    def control_step(self, state: SimState) -> dict[int, RawAction]:
        if self.plans is None:
            self.order = priority_order(state)
            self.plans = plan_from_state(state, self.order)
        joint: dict[int, RawAction] = {}
        for t in state.trains:
            if t.status.terminal:
                continue
            plan = self.plans[t.train]
            expected = plan.positions.get(state.clock)
            if expected != t.pose:
                raise SimulationError(
                    f"train {t.train} diverged from its plan at tick {state.clock}: "
                    f"expected {expected}, actual {t.pose}"
                )
            joint[t.train] = plan.action_at(state.clock)
        return joint

    def observe(self, state: SimState, events: StepEvents) -> None:
        if state.done or not events.of_kind("malfunction_start"):
            return
        self.order = self.order or priority_order(state)
        self.plans = plan_from_state(state, self.order)
        self.replans += 1
        logger.debug(f"PP: перепланирование на такте {state.clock} (№{self.replans})")


def execute_plans(plans: dict[int, SpaceTimePlan], scenario: Scenario, seed: int):
    """Прогон планов через симулятор; возвращает трассу эпизода"""
    from app.services.runner import run_episode
    return run_episode(scenario, PlanExecutor(scenario, plans, seed), seed, controller_name="pp")


# --- избегание блокировок ---------------------------------------------------

def _through_next_segment(route: Route, grid, start: int, dp: Optional[int]) -> tuple[Pose, ...]:
    """Позы маршрута от start до точки решения, следующей за dp (или до цели)"""
    if dp is None:
        return route.poses[start:]
    end = len(route) - 1
    if dp + 1 < len(route):
        nxt, _ = next_decision_point(grid, route, dp + 1)
        end = end if nxt is None else nxt
    return route.poses[start:end + 1]


def _blocked(ctx: ObservationContext, train: int, poses, prev_cell: Optional[Cell]) -> bool:
    prev = prev_cell
    for pose in poses:
        claimant = ctx.claims.get(pose.cell)
        if claimant is not None and claimant != train:
            return True
        occ = ctx.occupancy.get(pose.cell)
        if occ is not None and occ != train:
            if prev is None or is_opposing(ctx, ctx.state.trains[occ], prev):
                return True
        prev = pose.cell
    return False


def _claim(ctx: ObservationContext, train: int, poses) -> None:
    for pose in poses:
        ctx.claims.setdefault(pose.cell, train)


class DeadlockAvoidancePolicy(Policy):
    """Фиксированный кратчайший маршрут без перестроений; въезд в сегмент только
    без встречных, заявки в пределах такта выдаются по возрастанию номера"""
    name = "deadlock-avoidance"

    def decide(self, request: DecisionRequest) -> int:
        ctx = request.ctx
        train = request.train
        if request.phase == Phase.DISPATCH:
            entry = ctx.state.scenario.trains[train]
            route = shortest_route(ctx.grid, entry.origin_pose, tuple(entry.target))
            if route is None:
                return MadsAction.WAIT
            dp, _ = next_decision_point(ctx.grid, route, 0)
            ahead = _through_next_segment(route, ctx.grid, 0, dp)
            if _blocked(ctx, train, ahead, None):
                return MadsAction.WAIT
            _claim(ctx, train, ahead)
            return MadsAction.DISPATCH

        view = route_view(ctx, train)
        if view.dp_index not in (0, 1):
            return MapfAction.PLANNED
        ahead = _through_next_segment(view.route, ctx.grid, 1, view.dp_index)
        pose = ctx.state.trains[train].pose
        if _blocked(ctx, train, ahead, pose.cell):
            return MapfAction.STOP
        _claim(ctx, train, ahead)
        return MapfAction.PLANNED
