# Статическая топология: клетки, направления, карты переходов, проверка сети
import json
import logging
from enum import IntEnum
from functools import cached_property
from typing import Iterable, NamedTuple

import networkx as nx
import numpy as np

from app.core.errors import GridError

logger = logging.getLogger(__name__)

Cell = tuple[int, int]


class Heading(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    def reverse(self) -> "Heading":
        return Heading((self + 2) % 4)

    def left(self) -> "Heading":
        return Heading((self + 3) % 4)

    def right(self) -> "Heading":
        return Heading((self + 1) % 4)


DELTAS: dict[Heading, Cell] = {
    Heading.NORTH: (-1, 0),
    Heading.EAST: (0, 1),
    Heading.SOUTH: (1, 0),
    Heading.WEST: (0, -1),
}


class Pose(NamedTuple):
    cell: Cell
    heading: Heading


class Station(NamedTuple):
    cell: Cell
    city: int


class Violation(NamedTuple):
    kind: str
    cell: Cell
    other: Cell | None
    detail: str


def neighbour(cell: Cell, heading: Heading) -> Cell:
    dr, dc = DELTAS[heading]
    return cell[0] + dr, cell[1] + dc


def transition_bit(incoming: Heading, outgoing: Heading) -> int:
    # Бит (incoming * 4 + outgoing), младший бит = (N -> N)
    return 1 << (int(incoming) * 4 + int(outgoing))


def fnv1a_64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class RailGrid:
    """Неизменяемая сеть: массив 16-битных карт переходов (строки x столбцы)"""

    def __init__(self, cells: np.ndarray, stations: Iterable[Station] = ()):
        cells = np.array(cells, dtype=np.uint16)
        if cells.ndim != 2:
            raise GridError("cells must be a 2-D array")
        cells.flags.writeable = False
        self._cells = cells
        self._stations = tuple(Station(tuple(s[0]), int(s[1])) for s in stations)

    @property
    def height(self) -> int:
        return int(self._cells.shape[0])

    @property
    def width(self) -> int:
        return int(self._cells.shape[1])

    @property
    def cells(self) -> np.ndarray:
        return self._cells

    @property
    def stations(self) -> tuple[Station, ...]:
        return self._stations

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def bits(self, cell: Cell) -> int:
        if not self.in_bounds(cell):
            raise GridError(f"cell {cell} is out of bounds {self.height}x{self.width}")
        return int(self._cells[cell])

    def is_rail(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and self._cells[cell] != 0

    @cached_property
    def rail_cells(self) -> tuple[Cell, ...]:
        rows, cols = np.nonzero(self._cells)
        return tuple((int(r), int(c)) for r, c in zip(rows, cols))

    def with_cell(self, cell: Cell, bits: int) -> "RailGrid":
        cells = self._cells.copy()
        cells[cell] = bits
        return RailGrid(cells, self._stations)

    # --- сериализация ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "cells": [int(v) for v in self._cells.ravel()],
            "stations": [[s.cell[0], s.cell[1], s.city] for s in self._stations],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RailGrid":
        try:
            cells = np.array(data["cells"], dtype=np.uint16).reshape(data["height"], data["width"])
            stations = [Station((int(r), int(c)), int(city)) for r, c, city in data["stations"]]
        except (KeyError, ValueError, TypeError) as e:
            raise GridError(f"malformed grid document: {e}") from e
        return cls(cells, stations)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @cached_property
    def map_hash(self) -> str:
        return f"{fnv1a_64(self.to_json().encode('utf-8')):016x}"

    def __eq__(self, other) -> bool:
        return isinstance(other, RailGrid) and self.map_hash == other.map_hash

    def __hash__(self) -> int:
        return hash(self.map_hash)

    def __repr__(self) -> str:
        return f"RailGrid({self.height}x{self.width}, stations={len(self._stations)}, hash={self.map_hash})"


# --- операции над переходами -----------------------------------------------

def allowed_exits(grid: RailGrid, cell: Cell, incoming: Heading) -> set[Heading]:
    bits = grid.bits(cell)
    base = int(incoming) * 4
    return {Heading(o) for o in range(4) if bits & (1 << (base + o))}


def branch_count(grid: RailGrid, cell: Cell, incoming: Heading) -> int:
    return len(allowed_exits(grid, cell, incoming))


def is_decision_point(grid: RailGrid, pose: Pose) -> bool:
    return branch_count(grid, pose.cell, pose.heading) >= 2


def valid_headings(grid: RailGrid, cell: Cell) -> list[Heading]:
    """Направления, с которыми поезд может стоять в клетке"""
    return [h for h in Heading if allowed_exits(grid, cell, h)]


def successors(grid: RailGrid, pose: Pose) -> list[Pose]:
    out = []
    for h in sorted(allowed_exits(grid, pose.cell, pose.heading)):
        nxt = neighbour(pose.cell, h)
        if grid.in_bounds(nxt):
            out.append(Pose(nxt, h))
    return out


def pose_graph(grid: RailGrid) -> nx.DiGraph:
    """Ориентированный граф поз (клетка x направление)"""
    graph = nx.DiGraph()
    for cell in grid.rail_cells:
        for h in valid_headings(grid, cell):
            pose = Pose(cell, h)
            graph.add_node(pose)
            for nxt in successors(grid, pose):
                graph.add_edge(pose, nxt)
    return graph


# --- построение сетей -------------------------------------------------------

def grid_from_links(
    height: int,
    width: int,
    links: dict[Cell, set[Heading]],
    stations: Iterable[Station] = (),
) -> RailGrid:
    """Переводит неориентированные связи соседних клеток в карты переходов.

    Поезд, въехавший в клетку с направлением h, пришёл со стороны reverse(h);
    выехать можно в любую другую связанную сторону. Клетка с единственной
    связью становится тупиком с разворотом.
    """
    cells = np.zeros((height, width), dtype=np.uint16)
    for cell, sides in links.items():
        for side in sides:
            other = neighbour(cell, side)
            if not (0 <= other[0] < height and 0 <= other[1] < width):
                raise GridError(f"link {cell}->{side.name} leaves the grid")
            if side.reverse() not in links.get(other, set()):
                raise GridError(f"link {cell}->{side.name} is not mirrored by {other}")
        bits = 0
        for h in Heading:
            came_from = h.reverse()
            if came_from not in sides:
                continue
            exits = sides - {came_from} or {came_from}
            for o in exits:
                bits |= transition_bit(h, o)
        cells[cell] = bits
    return RailGrid(cells, stations)


_GLYPHS: dict[str, set[Heading]] = {
    "-": {Heading.EAST, Heading.WEST},
    "|": {Heading.NORTH, Heading.SOUTH},
    "+": set(Heading),
    "#": set(Heading),
}


def grid_from_ascii(rows: list[str], stations: Iterable[Station] = ()) -> RailGrid:
    """Сеть из ASCII-схемы: '-', '|', '+'/'#' (все стороны), '.' или ' ': пусто.

    Соседи связаны, если оба символа допускают общую сторону.
    """
    height, width = len(rows), max(len(r) for r in rows)
    grid_rows = [r.ljust(width, ".") for r in rows]
    links: dict[Cell, set[Heading]] = {}
    for r, row in enumerate(grid_rows):
        for c, ch in enumerate(row):
            if ch not in _GLYPHS:
                continue
            sides = set()
            for h in _GLYPHS[ch]:
                nr, nc = neighbour((r, c), h)
                if 0 <= nr < height and 0 <= nc < width:
                    other = grid_rows[nr][nc]
                    if other in _GLYPHS and h.reverse() in _GLYPHS[other]:
                        sides.add(h)
            if sides:
                links[(r, c)] = sides
    return grid_from_links(height, width, links, stations)


# --- проверка ---------------------------------------------------------------

def validate_grid(grid: RailGrid) -> list[Violation]:
    violations: list[Violation] = []
    for cell in grid.rail_cells:
        for incoming in Heading:
            for out in sorted(allowed_exits(grid, cell, incoming)):
                other = neighbour(cell, out)
                if not grid.in_bounds(other):
                    violations.append(Violation("exit_off_grid", cell, None, f"{incoming.name}->{out.name}"))
                elif not allowed_exits(grid, other, out):
                    violations.append(Violation(
                        "one_way_mismatch", cell, other,
                        f"exit {out.name} from {cell} has no continuation in {other}",
                    ))

    rail_stations = []
    for station in grid.stations:
        if not grid.is_rail(station.cell):
            violations.append(Violation("station_not_rail", station.cell, None, f"city {station.city}"))
        else:
            rail_stations.append(station)

    if grid.stations:
        graph = pose_graph(grid)
        for station in grid.stations:
            sources = [s for s in rail_stations if s.cell != station.cell]
            if not any(_cell_reachable(grid, graph, s.cell, station.cell) for s in sources):
                violations.append(Violation(
                    "station_unreachable", station.cell, None,
                    "no other station reaches this station",
                ))
    return violations


def _cell_reachable(grid: RailGrid, graph: nx.DiGraph, source: Cell, target: Cell) -> bool:
    seen: set[Pose] = set()
    for h in valid_headings(grid, source):
        start = Pose(source, h)
        if start in seen:
            continue
        reached = nx.descendants(graph, start) | {start}
        if any(p.cell == target for p in reached):
            return True
        seen |= reached
    return False


def stations_connected(grid: RailGrid) -> bool:
    """Каждая пара станций связана ориентированным путём"""
    graph = pose_graph(grid)
    cells = [s.cell for s in grid.stations]
    for source in cells:
        reached: set[Cell] = set()
        for h in valid_headings(grid, source):
            reached |= {p.cell for p in nx.descendants(graph, Pose(source, h))}
        if any(t != source and t not in reached for t in cells):
            return False
    return True
