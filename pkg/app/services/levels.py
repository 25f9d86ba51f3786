# Уровни бенчмарка и генерация расписаний
import logging
import math
from fractions import Fraction

import numpy as np

from app.config import settings
from app.core.errors import ScenarioError
from app.core.generator import generate_map
from app.core.rail import Pose, RailGrid, valid_headings
from app.core.routing import distance_to_target
from app.schemas.scenario import (
    EpisodeConfig,
    GeneratorParams,
    GridDocument,
    LevelSpec,
    Scenario,
    TimetableEntry,
)

logger = logging.getLogger(__name__)

MAX_PAIR_ATTEMPTS = 100

# Сложность уровней: поезда, размер карты (ширина x высота), города, вероятность неисправности
LEVELS: dict[int, LevelSpec] = {
    0: LevelSpec(level=0, n_trains=7, width=30, height=30, n_cities=2, malfunction_rate=1 / 540),
    1: LevelSpec(level=1, n_trains=10, width=30, height=30, n_cities=2, malfunction_rate=1 / 900),
    2: LevelSpec(level=2, n_trains=20, width=30, height=30, n_cities=3, malfunction_rate=1 / 1800),
    3: LevelSpec(level=3, n_trains=50, width=30, height=35, n_cities=3, malfunction_rate=1 / 4500),
    4: LevelSpec(level=4, n_trains=80, width=35, height=30, n_cities=5, malfunction_rate=1 / 7200),
}


def level_spec(level: int, speed_profile: str | None = None, **overrides) -> LevelSpec:
    if level not in LEVELS:
        raise ScenarioError(f"unknown level {level}, expected one of {sorted(LEVELS)}")
    spec = LEVELS[level]
    changes = dict(overrides)
    if speed_profile is not None:
        parse_speed_profile(speed_profile)
        changes["speed_profile"] = speed_profile
    if not changes:
        return spec
    # отличие от табличной строки помечается как пользовательская конфигурация
    custom = any(k != "speed_profile" for k in changes) or changes.get("speed_profile", "constant") != "constant"
    return spec.model_copy(update={**changes, "custom": custom})


def parse_speed_profile(profile: str) -> list[Fraction]:
    """'constant' или 'fractional:1,0.5': скорости назначаются по кругу по номеру поезда"""
    if profile == "constant":
        return [Fraction(1)]
    kind, _, body = profile.partition(":")
    if kind != "fractional" or not body:
        raise ScenarioError(f"bad speed profile '{profile}'")
    speeds = []
    for part in body.split(","):
        try:
            value = Fraction(part.strip()).limit_denominator(64)
        except (ValueError, ZeroDivisionError) as e:
            raise ScenarioError(f"bad speed '{part}' in profile '{profile}'") from e
        if not 0 < value <= 1:
            raise ScenarioError(f"speed {value} outside (0, 1]")
        speeds.append(value)
    return speeds


def base_horizon(width: int, height: int, n_trains: int, n_cities: int, beta: float) -> int:
    if beta <= 0:
        raise ScenarioError("horizon beta must be positive")
    return math.ceil(beta * (width + height + n_trains / n_cities))


def _best_heading(grid: RailGrid, origin, target):
    options = []
    for h in valid_headings(grid, origin):
        d = distance_to_target(grid, Pose(origin, h), target)
        if d is not None:
            options.append((d, int(h)))
    return min(options) if options else None


def generate_timetable(
    grid: RailGrid,
    n_trains: int,
    speeds: list[Fraction],
    t_max: int,
    rng: np.random.Generator,
    slack: float | None = None,
    spread: float | None = None,
) -> list[TimetableEntry]:
    slack = settings.SCHEDULE_SLACK if slack is None else slack
    spread = settings.DEPARTURE_SPREAD if spread is None else spread
    by_city: dict[int, list] = {}
    for station in grid.stations:
        by_city.setdefault(station.city, []).append(station.cell)
    cities = sorted(by_city)
    if len(cities) < 2:
        raise ScenarioError("timetable needs stations in at least two cities")

    entries = []
    for train in range(n_trains):
        speed = speeds[train % len(speeds)]
        for _ in range(MAX_PAIR_ATTEMPTS):
            a, b = rng.choice(len(cities), size=2, replace=False)
            origin_choices = by_city[cities[a]]
            target_choices = by_city[cities[b]]
            origin = origin_choices[int(rng.integers(len(origin_choices)))]
            target = target_choices[int(rng.integers(len(target_choices)))]
            best = _best_heading(grid, origin, target)
            if best is None:
                continue
            dist, heading = best
            travel = math.ceil(math.ceil(dist / speed) * (1 + slack))
            latest = min(math.floor(spread * t_max), t_max - travel - 1)
            if latest < 0:
                continue
            departure = int(rng.integers(0, latest + 1))
            entries.append(TimetableEntry(
                train=train,
                origin=origin,
                origin_heading=heading,
                target=target,
                earliest_departure=departure,
                scheduled_arrival=departure + travel,
                speed=float(speed),
            ))
            break
        else:
            raise ScenarioError(f"no feasible origin/target pair for train {train}")
    return entries


def build_scenario(spec: LevelSpec, seed: int, beta: float | None = None) -> Scenario:
    """Карта и расписание из одного seed; дробный профиль растягивает горизонт"""
    beta = settings.HORIZON_BETA if beta is None else beta
    grid = generate_map(GeneratorParams(
        width=spec.width, height=spec.height, n_cities=spec.n_cities, seed=seed,
    ))
    speeds = parse_speed_profile(spec.speed_profile)
    t_max = base_horizon(spec.width, spec.height, spec.n_trains, spec.n_cities, beta)
    override = None
    if min(speeds) < 1:
        t_max = math.ceil(t_max / min(speeds))
        override = t_max
    rng = np.random.default_rng([seed, spec.level, spec.n_trains])
    trains = generate_timetable(grid, spec.n_trains, speeds, t_max, rng)
    scenario = Scenario(
        name=f"level{spec.level}-seed{seed}",
        grid=GridDocument.from_grid(grid),
        n_cities=spec.n_cities,
        trains=trains,
        config=EpisodeConfig(
            malfunction_rate=spec.malfunction_rate,
            malfunction_duration=spec.malfunction_duration,
        ),
        beta=beta,
        t_max=override,
        level=spec.level,
        speed_profile=spec.speed_profile,
    )
    scenario.check()
    logger.debug(f"Сценарий {scenario.name}: T_max={t_max}, карта {scenario.map_hash}")
    return scenario
