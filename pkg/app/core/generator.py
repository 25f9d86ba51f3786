# Генератор карт "города + коридоры"
import logging
from dataclasses import dataclass

import numpy as np
from tenacity import retry, retry_if_exception_type, stop_after_attempt

from app.core.errors import MapGenerationError, PlacementError
from app.core.rail import Cell, Heading, RailGrid, Station, grid_from_links, neighbour, stations_connected, validate_grid
from app.schemas.scenario import GeneratorParams

logger = logging.getLogger(__name__)

CITY_LENGTH = 5        # длина станционного пути
MAX_ATTEMPTS = 200     # попыток размещения до ошибки
EDGE_MARGIN = 2


@dataclass(frozen=True)
class City:
    city_id: int
    row: int          # строка верхнего пути
    col: int          # первый столбец путей
    tracks: int

    @property
    def west_junction(self) -> Cell:
        return self.row, self.col - 1

    @property
    def east_junction(self) -> Cell:
        return self.row, self.col + CITY_LENGTH

    @property
    def footprint(self) -> tuple[int, int, int, int]:
        # (r0, c0, r1, c1) включительно, с запасом под тупики и подходы
        return self.row - 2, self.col - 3, self.row + self.tracks + 1, self.col + CITY_LENGTH + 2

    def overlaps(self, other: "City") -> bool:
        a, b = self.footprint, other.footprint
        return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


class _LinkBuilder:
    def __init__(self, height: int, width: int):
        self.height, self.width = height, width
        self.links: dict[Cell, set[Heading]] = {}

    def connect(self, a: Cell, b: Cell) -> None:
        for h, (dr, dc) in ((Heading.NORTH, (-1, 0)), (Heading.EAST, (0, 1)),
                            (Heading.SOUTH, (1, 0)), (Heading.WEST, (0, -1))):
            if (a[0] + dr, a[1] + dc) == b:
                self.links.setdefault(a, set()).add(h)
                self.links.setdefault(b, set()).add(h.reverse())
                return
        raise PlacementError(f"cells {a} and {b} are not adjacent")

    def polyline(self, points: list[Cell]) -> None:
        """Соединяет ломаную из осевых отрезков"""
        for start, end in zip(points, points[1:]):
            cur = start
            while cur != end:
                step_r = (end[0] > cur[0]) - (end[0] < cur[0])
                step_c = (end[1] > cur[1]) - (end[1] < cur[1]) if step_r == 0 else 0
                nxt = (cur[0] + step_r, cur[1] + step_c)
                if not (0 <= nxt[0] < self.height and 0 <= nxt[1] < self.width):
                    raise PlacementError(f"corridor leaves the grid at {nxt}")
                self.connect(cur, nxt)
                cur = nxt


class CityCorridorGenerator:
    """Размещает города и соединяет их коридорами по остовному дереву"""

    def __init__(self, params: GeneratorParams):
        self.params = params
        self.rng = np.random.default_rng(params.seed)
        self.attempts = 0

    def generate(self) -> RailGrid:
        try:
            return self._attempt()
        except PlacementError as e:
            raise MapGenerationError(
                f"map placement failed after {self.attempts} attempts: {e}", self.params.seed,
            ) from e

    @retry(
        stop=stop_after_attempt(MAX_ATTEMPTS),
        retry=retry_if_exception_type(PlacementError),
        reraise=True,
    )
    def _attempt(self) -> RailGrid:
        self.attempts += 1
        cities = self._place_cities()
        builder = _LinkBuilder(self.params.height, self.params.width)
        stations: list[Station] = []
        for city in cities:
            stations.extend(self._build_city(builder, city))
        for a, b in self._spanning_pairs(cities):
            self._build_corridor(builder, a, b)
        grid = grid_from_links(self.params.height, self.params.width, builder.links, stations)
        if validate_grid(grid) or not stations_connected(grid):
            raise PlacementError("generated network failed validation")
        logger.debug(f"Карта построена с попытки {self.attempts}: {grid!r}")
        return grid

    def _place_cities(self) -> list[City]:
        p = self.params
        tracks = p.max_parallel_rails
        r_lo, r_hi = EDGE_MARGIN + 2, p.height - tracks - EDGE_MARGIN - 2
        c_lo, c_hi = EDGE_MARGIN + 3, p.width - CITY_LENGTH - EDGE_MARGIN - 3
        if r_hi < r_lo or c_hi < c_lo:
            raise PlacementError("grid too small for a city footprint")
        cities: list[City] = []
        for city_id in range(p.n_cities):
            for _ in range(MAX_ATTEMPTS):
                candidate = City(
                    city_id,
                    int(self.rng.integers(r_lo, r_hi + 1)),
                    int(self.rng.integers(c_lo, c_hi + 1)),
                    tracks,
                )
                if not any(candidate.overlaps(c) for c in cities):
                    cities.append(candidate)
                    break
            else:
                raise PlacementError(f"no room for city {city_id}")
        return cities

    def _build_city(self, builder: _LinkBuilder, city: City) -> list[Station]:
        stations = []
        west, east = city.west_junction, city.east_junction
        for t in range(city.tracks):
            row = city.row + t
            builder.polyline([(row, city.col - 1), (row, city.col + CITY_LENGTH)])
            stations.append(Station((row, city.col + CITY_LENGTH // 2), city.city_id))
        if city.tracks > 1:
            # Кольцо через обе горловины: разворот внутри города
            last = city.row + city.tracks - 1
            builder.polyline([west, (last, west[1])])
            builder.polyline([east, (last, east[1])])
        # Тупики у горловин: разворот для поездов на подходе
        builder.connect(west, neighbour(west, Heading.NORTH))
        builder.connect(east, neighbour(east, Heading.NORTH))
        return stations

    def _spanning_pairs(self, cities: list[City]) -> list[tuple[City, City]]:
        # Цепочка по столбцам: соседние города соединяются коридорами
        ordered = sorted(cities, key=lambda c: (c.col, c.row))
        pairs = list(zip(ordered, ordered[1:]))
        if len(ordered) > 2:
            pairs.append((ordered[0], ordered[-1]))
        return pairs

    def _build_corridor(self, builder: _LinkBuilder, a: City, b: City) -> None:
        start, end = a.east_junction, b.west_junction
        if end[1] - start[1] >= 4:
            # Z-образный коридор: выход вправо, перегон по вертикали, вход слева
            mid = (start[1] + end[1]) // 2
            points = [start, (start[0], mid), (end[0], mid), end]
        else:
            # Города перекрываются по столбцам: C-образный обход справа
            far = max(start[1], b.east_junction[1]) + 2
            if far >= self.params.width:
                raise PlacementError("no room for a corridor around the cities")
            end = b.east_junction
            points = [start, (start[0], far), (end[0], far), end]
        if points[1] == points[2]:
            points = [points[0], points[1], points[3]]
        builder.polyline(points)


def generate_map(params: GeneratorParams) -> RailGrid:
    grid = CityCorridorGenerator(params).generate()
    logger.info(f"✅ Карта {params.width}x{params.height}, городов: {params.n_cities}, seed={params.seed}: {grid.map_hash}")
    return grid
