# Маршруты и аналитика конфликтов: кратчайшие и top-k пути, точки решения,
# проекция пересечений, обнаружение тупиковых блокировок
import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from itertools import islice
from typing import NamedTuple, Optional

import networkx as nx

from app.core.errors import RouteError
from app.core.rail import Cell, Heading, Pose, RailGrid, allowed_exits, branch_count, neighbour, pose_graph, successors
from app.core.simulator import SimState, TrainStatus

logger = logging.getLogger(__name__)

SINK = Pose((-1, -1), Heading.NORTH)
TIE_PULL_LIMIT = 64  # сколько равных по стоимости путей добираем для лексикографического порядка


@dataclass(frozen=True)
class Route:
    poses: tuple[Pose, ...]

    @property
    def cost(self) -> int:
        return len(self.poses) - 1

    @cached_property
    def cells(self) -> tuple[Cell, ...]:
        return tuple(p.cell for p in self.poses)

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, index):
        return self.poses[index]


@dataclass(frozen=True)
class TopKPaths:
    routes: tuple[Route, ...]
    k: int

    def __len__(self) -> int:
        return len(self.routes)

    def __iter__(self):
        return iter(self.routes)


class ConflictProjection(NamedTuple):
    n_conflict_cells: int
    dist_self: int
    dist_other: int
    time_gap: int = 0


# --- граф поз и карты расстояний --------------------------------------------

@lru_cache(maxsize=32)
def _base_graph(grid: RailGrid) -> nx.DiGraph:
    return pose_graph(grid)


@lru_cache(maxsize=512)
def _target_graph(grid: RailGrid, target: Cell) -> tuple[nx.DiGraph, dict[Pose, int]]:
    """Граф поз, оканчивающийся в стоке при первом въезде в клетку цели"""
    graph = _base_graph(grid).copy()
    target_poses = [p for p in graph.nodes if p.cell == target]
    for pose in target_poses:
        graph.remove_edges_from(list(graph.out_edges(pose)))
        graph.add_edge(pose, SINK)
    if SINK not in graph:
        graph.add_node(SINK)
    lengths = nx.single_source_shortest_path_length(graph.reverse(copy=False), SINK)
    dist = {pose: d - 1 for pose, d in lengths.items() if pose != SINK}
    return graph, dist


def _check_pose(grid: RailGrid, pose: Pose) -> None:
    if not grid.in_bounds(pose.cell) or not allowed_exits(grid, pose.cell, pose.heading):
        raise RouteError(f"pose {pose} is not a rail pose")


def distance_to_target(grid: RailGrid, pose: Pose, target: Cell) -> Optional[int]:
    """Число шагов до цели по графу поз, без учёта поездов"""
    if pose.cell == target:
        return 0
    _, dist = _target_graph(grid, target)
    return dist.get(pose)


def shortest_route(grid: RailGrid, start: Pose, target: Cell) -> Optional[Route]:
    _check_pose(grid, start)
    return _cached_route(grid, start, tuple(target))


# один неизменяемый маршрут на (сеть, поза, цель)
@lru_cache(maxsize=65536)
def _cached_route(grid: RailGrid, start: Pose, target: Cell) -> Optional[Route]:
    if start.cell == target:
        return Route((start,))
    _, dist = _target_graph(grid, target)
    if start not in dist:
        return None
    poses = [start]
    cur = start
    while cur.cell != target:
        # равные по стоимости продолжения: лексикографически меньшая поза
        cur = min(p for p in successors(grid, cur) if dist.get(p) == dist[cur] - 1)
        poses.append(cur)
    return Route(tuple(poses))


replan_from = shortest_route


def top_k_routes(grid: RailGrid, start: Pose, target: Cell, k: int) -> TopKPaths:
    if k < 1:
        raise RouteError("k must be >= 1")
    best = shortest_route(grid, start, target)
    if best is None:
        return TopKPaths((), k)
    if k == 1 or start.cell == target:
        return TopKPaths((best,), k)

    graph, _ = _target_graph(grid, target)
    others: list[tuple[Pose, ...]] = []
    # отклонения от кратчайшего пути (алгоритм Йена); совпадения по стоимости
    # добираются, чтобы порядок был лексикографическим
    for path in islice(nx.shortest_simple_paths(graph, start, SINK), TIE_PULL_LIMIT + k):
        poses = tuple(path[:-1])
        if poses == best.poses:
            continue
        if len(others) >= k - 1 and len(poses) > len(others[-1]):
            break
        others.append(poses)
    others.sort(key=lambda p: (len(p), p))
    routes = (best,) + tuple(Route(p) for p in others[: k - 1])
    return TopKPaths(routes, k)


def next_decision_point(grid: RailGrid, route: Route, index: int = 0) -> tuple[Optional[int], int]:
    """Первая поза маршрута (начиная с index) с >= 2 выходами.

    Возвращает (индекс, шагов до неё); если цель достигается раньше,
    (None, шагов до цели).
    """
    if not 0 <= index < len(route):
        raise RouteError(f"index {index} outside route of length {len(route)}")
    for i in range(index, len(route) - 1):
        pose = route[i]
        if branch_count(grid, pose.cell, pose.heading) >= 2:
            return i, i - index
    return None, len(route) - 1 - index


def project_conflicts(
    route_a: Route,
    route_b: Route,
    t_a: int = 0,
    t_b: int = 0,
    no_conflict: int = 0,
) -> ConflictProjection:
    """Пространственное пересечение маршрутов; сдвиги по времени только фиксируются"""
    shared = set(route_a.cells) & set(route_b.cells)
    if not shared:
        return ConflictProjection(0, no_conflict, no_conflict, 0)
    dist_self = next(i for i, c in enumerate(route_a.cells) if c in shared)
    dist_other = next(i for i, c in enumerate(route_b.cells) if c in shared)
    return ConflictProjection(len(shared), dist_self, dist_other, (t_a + dist_self) - (t_b + dist_other))


# --- блокировки ------------------------------------------------------------

def exit_cells(grid: RailGrid, pose: Pose) -> list[Cell]:
    return [neighbour(pose.cell, h) for h in sorted(allowed_exits(grid, pose.cell, pose.heading))]


def wait_for_graph(grid: RailGrid, state: SimState) -> nx.DiGraph:
    """Рёбра i->j, только если все допустимые следующие клетки i заняты"""
    occupant = state.occupancy()
    graph = nx.DiGraph()
    for t in state.trains:
        if t.status != TrainStatus.ACTIVE:
            continue
        graph.add_node(t.train)
        cells = exit_cells(grid, t.pose)
        if not cells or any(c not in occupant for c in cells):
            continue
        for c in cells:
            graph.add_edge(t.train, occupant[c])
    return graph


def detect_deadlocks(grid: RailGrid, state: SimState) -> set[int]:
    """Поезда, которые уже никогда не сдвинутся (корректно, но не полно).

    Наибольшее множество, где каждый выход каждого члена занят членом этого
    же множества: циклы ожидания плюс их замыкание.
    """
    graph = wait_for_graph(grid, state)
    blocked = {n for n in graph.nodes if graph.out_degree(n) > 0}
    changed = True
    while changed:
        changed = False
        for n in sorted(blocked):
            if any(m not in blocked for m in graph.successors(n)):
                blocked.discard(n)
                changed = True
    return blocked
