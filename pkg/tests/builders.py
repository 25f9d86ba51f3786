# Ручные микрокарты и сценарии для тестов
from fractions import Fraction

from app.core.rail import Heading, Station, grid_from_ascii
from app.core.simulator import RawAction, SimState, TrainStatus, reset
from app.schemas.scenario import EpisodeConfig, GridDocument, Scenario, TimetableEntry

E, W, N, S = Heading.EAST, Heading.WEST, Heading.NORTH, Heading.SOUTH

CROSS = [
    "..|..",
    "..|..",
    "--+--",
    "..|..",
    "..|..",
]

RING = [
    "++",
    "++",
]

# Разъезд: две колеи между стрелками в (1,3) и (1,8)
SIDING = [
    "...+----+...",
    "---+----+---",
]


def train(origin, heading, target, ed=0, sched=None, speed=1.0) -> dict:
    return {"origin": origin, "heading": heading, "target": target, "ed": ed, "sched": sched, "speed": speed}


def scenario_from(rows, trains, t_max=60, malfunction_rate=0.0, malfunction_duration=(20, 50),
                  reject_cycles=True, name="micro") -> Scenario:
    """Станции ставятся во всех клетках отправления и назначения"""
    cells = []
    for t in trains:
        for cell in (t["origin"], t["target"]):
            if cell not in cells:
                cells.append(cell)
    grid = grid_from_ascii(rows, [Station(c, i % 2) for i, c in enumerate(cells)])
    entries = [
        TimetableEntry(
            train=i,
            origin=t["origin"],
            origin_heading=int(t["heading"]),
            target=t["target"],
            earliest_departure=t["ed"],
            scheduled_arrival=t["sched"] if t["sched"] is not None else t_max,
            speed=t["speed"],
        )
        for i, t in enumerate(trains)
    ]
    return Scenario(
        name=name,
        grid=GridDocument.from_grid(grid),
        trains=entries,
        config=EpisodeConfig(
            malfunction_rate=malfunction_rate,
            malfunction_duration=malfunction_duration,
            reject_cycles=reject_cycles,
        ),
        t_max=t_max,
    )


def corridor(length=10):
    return ["-" * length]


def place(state: SimState, train_id: int, cell, heading) -> None:
    """Поставить поезд в сеть в обход отправления"""
    t = state.trains[train_id]
    t.status = TrainStatus.ACTIVE
    t.cell, t.heading = tuple(cell), Heading(heading)
    t.progress = Fraction(0)
    t.moving = True
    t.last_action = RawAction.FORWARD
    t.departed = state.clock


def placed_state(scenario: Scenario, placements: dict, seed: int = 0) -> SimState:
    state = reset(scenario, seed)
    for tid, (cell, heading) in placements.items():
        place(state, tid, cell, heading)
    return state


def run_to_end(state: SimState, driver) -> list:
    from app.core.simulator import step

    events = []
    while not state.done:
        state, ev = step(state, driver.control_step(state))
        events.append(ev)
    return events
