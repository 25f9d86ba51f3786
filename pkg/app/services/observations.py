# Наблюдения: DispatchObservation для диспетчера и матрица 3x53 для маршрутизатора
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from app.config import settings
from app.core.errors import ControlError
from app.core.rail import Cell, Pose, allowed_exits, branch_count, neighbour
from app.core.routing import (
    ConflictProjection,
    Route,
    detect_deadlocks,
    distance_to_target,
    exit_cells,
    next_decision_point,
    project_conflicts,
    shortest_route,
    top_k_routes,
)
from app.core.simulator import SimState, TrainState, TrainStatus

logger = logging.getLogger(__name__)

LAYOUT_VERSION = "layout53/1"
DISPATCH_LAYOUT_VERSION = "dispatch5/1"
MALFUNCTION_NORM = 50
UNREACHABLE = math.inf


class FeatureLayout53:
    """Именованная раскладка 53 признаков строки маршрутизатора"""

    STATUS = ("valid", "is_self", "on_map", "malfunctioning", "malfunction_remaining",
              "dist_to_target", "remaining_time", "at_decision_point")
    SEGMENT = ("steps_to_dp", "trains_ahead", "opposing_on_segment", "dist_opposing",
               "dist_same_direction", "next_dp_branches")
    BRANCH = ("exists", "steps_to_target", "steps_to_branch_dp", "deadlock_on_branch",
              "dist_deadlock", "conflict_count", "dist_first_conflict", "first_conflict_opposing",
              "target_on_branch", "usable", "occupancy", "malfunction_on_branch")
    BEYOND = ("any_deadlock", "min_dist_deadlock", "min_travel", "max_travel",
              "sub_branches", "target_reachable")
    PADDING = ("bias", "depth", "reserved")

    NAMES: tuple[str, ...] = (
        STATUS + SEGMENT
        + tuple(f"short_{n}" for n in BRANCH)
        + tuple(f"alt_{n}" for n in BRANCH)
        + tuple(f"beyond_short_{n}" for n in BEYOND)
        + tuple(f"beyond_alt_{n}" for n in BEYOND)
        + PADDING
    )
    SIZE = len(NAMES)
    INDEX = {name: i for i, name in enumerate(NAMES)}

    @classmethod
    def index(cls, name: str) -> int:
        return cls.INDEX[name]


assert FeatureLayout53.SIZE == 53, "раскладка должна содержать 53 признака"

ROW_SELF, ROW_SHORT, ROW_ALT = 0, 1, 2


@dataclass
class DispatchObservation:
    global_features: np.ndarray          # (5,)
    conflicts: np.ndarray                # (n_trains, k, 3)
    active_mask: np.ndarray              # (n_trains,)
    projections: dict[tuple[int, int], ConflictProjection] = field(default_factory=dict)
    candidate_costs: tuple[int, ...] = ()
    layout_version: str = DISPATCH_LAYOUT_VERSION

    def flat(self) -> np.ndarray:
        return np.concatenate([
            self.global_features, self.conflicts.ravel(), self.active_mask.astype(float),
        ])


@dataclass
class RoutingObservation:
    rows: np.ndarray                     # (3, 53)
    action_mask: np.ndarray              # (3,) Planned, Deviate, Stop
    neighbours: tuple[Optional[int], Optional[int]] = (None, None)
    layout_version: str = LAYOUT_VERSION

    def flat(self) -> np.ndarray:
        return self.rows.ravel()

    def feature(self, row: int, name: str) -> float:
        return float(self.rows[row, FeatureLayout53.index(name)])


@dataclass
class Branch:
    """Ветка за точкой решения: от выхода до следующей точки решения или цели"""
    entry: Pose
    poses: tuple[Pose, ...]
    dist: float                 # шагов от входа ветки до цели
    ends_at_dp: bool


class ObservationContext:
    """Кэш на один такт: занятость, блокировки, маршруты поездов"""

    def __init__(self, state: SimState, k: int | None = None):
        self.state = state
        self.grid = state.grid
        self.k = k or settings.TOP_K
        self.t_max = state.t_max
        self.n_total = len(state.trains)
        self._routes: dict[int, Optional[Route]] = {}
        self.built = 0
        self.claims: dict[Cell, int] = {}  # заявки на клетки в пределах такта
        self.intents: dict[int, Cell] = {}  # следующие клетки уже решённых в этом такте поездов

    @cached_property
    def occupancy(self) -> dict[Cell, int]:
        return self.state.occupancy()

    @cached_property
    def deadlocked(self) -> set[int]:
        return detect_deadlocks(self.grid, self.state)

    def target(self, train: int) -> Cell:
        return tuple(self.state.scenario.trains[train].target)

    def route_of(self, train: int) -> Optional[Route]:
        if train not in self._routes:
            t = self.state.trains[train]
            self._routes[train] = shortest_route(self.grid, t.pose, self.target(train)) if t.pose else None
        return self._routes[train]

    def dist(self, pose: Pose, train: int) -> float:
        d = distance_to_target(self.grid, pose, self.target(train))
        return UNREACHABLE if d is None else d

    def ticks_needed(self, train: int, steps: float) -> float:
        if steps == UNREACHABLE:
            return UNREACHABLE
        speed = self.state.scenario.trains[train].speed_fraction
        return math.ceil(steps / speed)

    def branch_from(self, entry: Pose, train: int) -> Branch:
        d = self.dist(entry, train)
        if d == UNREACHABLE:
            return Branch(entry, (entry,), d, False)
        route = shortest_route(self.grid, entry, self.target(train))
        j, _ = next_decision_point(self.grid, route, 0)
        poses = route.poses if j is None else route.poses[: j + 1]
        return Branch(entry, tuple(poses), d, j is not None)

    def branches_at(self, dp: Pose, planned: Optional[Pose], train: int) -> tuple[Optional[Branch], Optional[Branch]]:
        """(плановая ветка, лучшая альтернативная) в точке решения"""
        entries = [Pose(neighbour(dp.cell, h), h) for h in sorted(allowed_exits(self.grid, dp.cell, dp.heading))]
        entries = [e for e in entries if self.grid.in_bounds(e.cell)]
        short = self.branch_from(planned, train) if planned is not None else None
        others = [e for e in entries if e != planned]
        if not others:
            return short, None
        alt_entry = min(others, key=lambda e: (self.dist(e, train), e))
        return short, self.branch_from(alt_entry, train)


# --- вспомогательные проверки ----------------------------------------------

def is_opposing(ctx: ObservationContext, other: TrainState, prev_cell: Cell) -> bool:
    """Встречный: следующий ход другого поезда ведёт в клетку, из которой пришли мы.

    Следующий ход берётся из решения этого такта, иначе из планового маршрута;
    без маршрута годится любой допустимый выход.
    """
    if other.train in ctx.intents:
        return ctx.intents[other.train] == prev_cell
    route = ctx.route_of(other.train)
    if route is not None and len(route) > 1:
        return route[1].cell == prev_cell
    return prev_cell in exit_cells(ctx.grid, other.pose)


def _norm(value: float, bound: float) -> float:
    if value == UNREACHABLE:
        return 1.0
    return float(min(max(value, 0), bound)) / bound


@dataclass
class _Encounter:
    distance: int
    train: int
    opposing: bool


def scan_poses(ctx: ObservationContext, subject: int, poses, prev_cell: Cell, offset: int) -> list[_Encounter]:
    found = []
    prev = prev_cell
    for i, pose in enumerate(poses):
        occ = ctx.occupancy.get(pose.cell)
        if occ is not None and occ != subject:
            other = ctx.state.trains[occ]
            found.append(_Encounter(offset + i, occ, is_opposing(ctx, other, prev)))
        prev = pose.cell
    return found


@dataclass
class RouteView:
    """Сегмент до ближайшей точки решения и ветки за ней"""
    route: Optional[Route]
    dp_index: Optional[int]
    dp_steps: int
    segment: tuple[Pose, ...]
    short: Optional[Branch] = None
    alt: Optional[Branch] = None


def route_view(ctx: ObservationContext, train: int) -> RouteView:
    route = ctx.route_of(train)
    if route is None:
        pose = ctx.state.trains[train].pose
        return RouteView(None, None, 0, (pose,))
    dp_index, steps = next_decision_point(ctx.grid, route, 0)
    if dp_index is None:
        return RouteView(route, None, steps, route.poses)
    view = RouteView(route, dp_index, steps, route.poses[: dp_index + 1])
    planned = route[dp_index + 1] if dp_index + 1 < len(route) else None
    view.short, view.alt = ctx.branches_at(route[dp_index], planned, train)
    return view


# --- строки маршрутизатора --------------------------------------------------

def _branch_block(ctx: ObservationContext, train: int, view: RouteView, branch: Optional[Branch],
                  usable: bool) -> list[float]:
    if branch is None:
        return [0.0] * len(FeatureLayout53.BRANCH)
    T, n = ctx.t_max, ctx.n_total
    base = view.dp_steps + 1
    dp_cell = view.segment[-1].cell
    hits = scan_poses(ctx, train, branch.poses, dp_cell, base)
    dead = [h for h in hits if h.train in ctx.deadlocked]
    malf = any(ctx.state.trains[h.train].malfunction > 0 for h in hits)
    target = ctx.target(train)
    return [
        1.0,
        _norm(base + branch.dist, T),
        _norm(base + len(branch.poses) - 1, T) if branch.ends_at_dp else 1.0,
        float(bool(dead)),
        _norm(dead[0].distance, T) if dead else 1.0,
        min(len(hits), n) / n,
        _norm(hits[0].distance, T) if hits else 1.0,
        float(hits[0].opposing) if hits else 0.0,
        float(branch.poses[-1].cell == target),
        float(usable),
        len(hits) / len(branch.poses),
        float(malf),
    ]


def _beyond_block(ctx: ObservationContext, train: int, view: RouteView, branch: Optional[Branch]) -> list[float]:
    if branch is None or not branch.ends_at_dp:
        return [0.0] * len(FeatureLayout53.BEYOND)
    T = ctx.t_max
    end = branch.poses[-1]
    base = view.dp_steps + 1 + len(branch.poses) - 1 + 1
    entries = [Pose(neighbour(end.cell, h), h) for h in sorted(allowed_exits(ctx.grid, end.cell, end.heading))]
    dead_dists, travel = [], []
    for entry in entries:
        sub = ctx.branch_from(entry, train)
        hits = scan_poses(ctx, train, sub.poses, end.cell, base)
        dead_dists += [h.distance for h in hits if h.train in ctx.deadlocked]
        if sub.dist != UNREACHABLE:
            travel.append(base + sub.dist)
    return [
        float(bool(dead_dists)),
        _norm(min(dead_dists), T) if dead_dists else 1.0,
        _norm(min(travel), T) if travel else 1.0,
        _norm(max(travel), T) if travel else 1.0,
        min(len(entries), 3) / 3,
        float(bool(travel)),
    ]


def alternative_usable(ctx: ObservationContext, train: int, view: RouteView) -> bool:
    if view.alt is None or view.alt.dist == UNREACHABLE:
        return False
    steps = view.dp_steps + 1 + view.alt.dist
    return ctx.ticks_needed(train, steps) <= ctx.state.remaining()


def encode_row(ctx: ObservationContext, train: int, is_self: bool) -> np.ndarray:
    t = ctx.state.trains[train]
    T, n = ctx.t_max, ctx.n_total
    view = route_view(ctx, train)
    pose = t.pose

    dist_target = ctx.dist(pose, train)
    status = [
        1.0,
        float(is_self),
        1.0,
        float(t.malfunction > 0),
        min(t.malfunction, MALFUNCTION_NORM) / MALFUNCTION_NORM,
        _norm(dist_target, T),
        _norm(ctx.state.remaining(), T),
        float(branch_count(ctx.grid, pose.cell, pose.heading) >= 2),
    ]

    ahead = scan_poses(ctx, train, view.segment[1:], pose.cell, 1)
    opposing = [h for h in ahead if h.opposing]
    same = [h for h in ahead if not h.opposing]
    dp_pose = view.segment[-1] if view.dp_index is not None else None
    segment = [
        _norm(view.dp_steps, T),
        min(len(ahead), n) / n,
        float(bool(opposing)),
        _norm(opposing[0].distance, T) if opposing else 1.0,
        _norm(same[0].distance, T) if same else 1.0,
        min(branch_count(ctx.grid, dp_pose.cell, dp_pose.heading), 3) / 3 if dp_pose else 0.0,
    ]

    short_usable = view.short is not None and view.short.dist != UNREACHABLE and \
        ctx.ticks_needed(train, view.dp_steps + 1 + view.short.dist) <= ctx.state.remaining()
    row = (
        status + segment
        + _branch_block(ctx, train, view, view.short, short_usable)
        + _branch_block(ctx, train, view, view.alt, alternative_usable(ctx, train, view))
        + _beyond_block(ctx, train, view, view.short)
        + _beyond_block(ctx, train, view, view.alt)
        + [1.0, 0.0 if is_self else 1.0, 0.0]
    )
    return np.asarray(row, dtype=float)


def first_neighbour(ctx: ObservationContext, train: int, view: RouteView, branch: Optional[Branch],
                    scan_segment: bool = True) -> Optional[int]:
    pose = ctx.state.trains[train].pose
    hits = scan_poses(ctx, train, view.segment[1:], pose.cell, 1) if scan_segment else []
    if not hits and branch is not None:
        hits = scan_poses(ctx, train, branch.poses, view.segment[-1].cell, view.dp_steps + 1)
    return hits[0].train if hits else None


def routing_action_mask(ctx: ObservationContext, train: int, view: RouteView | None = None) -> np.ndarray:
    """Planned и Stop доступны всегда; Deviate: только стоя на точке решения
    с альтернативой, успевающей к цели до конца эпизода"""
    view = view or route_view(ctx, train)
    deviate = view.dp_index == 0 and alternative_usable(ctx, train, view)
    return np.array([True, deviate, True])


def build_routing_obs(ctx: ObservationContext, train: int) -> RoutingObservation:
    t = ctx.state.trains[train]
    if t.status != TrainStatus.ACTIVE:
        raise ControlError("routing observation requested for an off-map train", train)
    view = route_view(ctx, train)
    rows = np.zeros((3, FeatureLayout53.SIZE), dtype=float)
    rows[ROW_SELF] = encode_row(ctx, train, is_self=True)

    short_nb = first_neighbour(ctx, train, view, view.short if view.dp_index is not None else None)
    alt_nb = first_neighbour(ctx, train, view, view.alt) if view.alt is not None else None
    if short_nb is not None:
        rows[ROW_SHORT] = encode_row(ctx, short_nb, is_self=False)
    if alt_nb is not None:
        rows[ROW_ALT] = encode_row(ctx, alt_nb, is_self=False)
    ctx.built += 1
    return RoutingObservation(rows, routing_action_mask(ctx, train, view), (short_nb, alt_nb))


# --- наблюдение диспетчера --------------------------------------------------

def build_dispatch_obs(ctx: ObservationContext, train: int, k: int | None = None) -> DispatchObservation:
    state = ctx.state
    t = state.trains[train]
    if not t.status.off_map:
        raise ControlError("dispatch observation requested for an on-map train", train)
    k = k or ctx.k
    T, n = ctx.t_max, ctx.n_total
    entry = state.scenario.trains[train]
    active = [tr for tr in state.trains if tr.status == TrainStatus.ACTIVE]

    global_features = np.array([
        min(n / settings.MAX_TRAINS_NORM, 1.0),
        len(active) / max(len(ctx.grid.rail_cells), 1),
        min(T / settings.MAX_HORIZON_NORM, 1.0),
        _norm(state.remaining(), T),
        len(active) / n,
    ])

    candidates = top_k_routes(ctx.grid, entry.origin_pose, tuple(entry.target), k)
    conflicts = np.zeros((n, k, 3))
    mask = np.zeros(n, dtype=bool)
    projections: dict[tuple[int, int], ConflictProjection] = {}
    for other in active:
        mask[other.train] = True
        best = ctx.route_of(other.train)
        if best is None:
            continue
        for ci, cand in enumerate(candidates.routes):
            proj = project_conflicts(cand, best, 0, 0, no_conflict=T)
            projections[(other.train, ci)] = proj
            conflicts[other.train, ci] = [
                proj.n_conflict_cells / len(set(cand.cells)),
                _norm(proj.dist_self, T),
                _norm(proj.dist_other, T),
            ]
    ctx.built += 1
    return DispatchObservation(
        global_features, conflicts, mask, projections, tuple(r.cost for r in candidates.routes),
    )
