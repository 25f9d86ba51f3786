import pytest

from app.core.errors import SimulationError
from app.core.routing import detect_deadlocks
from app.core.simulator import RawAction, TrainStatus, reset, restore, snapshot, step
from builders import CROSS, RING, E, N, S, W, corridor, placed_state, scenario_from, train

F, STOP, NOOP = RawAction.FORWARD, RawAction.STOP, RawAction.NOOP


def _corridor_pair():
    return scenario_from(corridor(8), [
        train((0, 1), E, (0, 7)),
        train((0, 6), W, (0, 0)),
        train((0, 1), E, (0, 7)),
    ])


def _moves(events):
    return {e.train: tuple(e.value) for e in events.of_kind("move")}


def test_follow_chain_moves_together():
    state = placed_state(_corridor_pair(), {0: ((0, 3), E), 2: ((0, 2), E)})
    state, events = step(state, {0: F, 2: F})
    assert _moves(events) == {0: (0, 4, int(E)), 2: (0, 3, int(E))}


def test_blocked_by_stationary_train():
    state = placed_state(_corridor_pair(), {0: ((0, 3), E), 2: ((0, 2), E)})
    state, events = step(state, {0: STOP, 2: F})
    assert _moves(events) == {}
    assert [e.train for e in events.of_kind("reject")] == [2]
    assert state.trains[2].cell == (0, 2)


def test_swap_is_rejected():
    state = placed_state(_corridor_pair(), {0: ((0, 2), E), 1: ((0, 3), W)})
    state, events = step(state, {0: F, 1: F})
    assert _moves(events) == {}
    assert sorted(e.train for e in events.of_kind("reject")) == [0, 1]


def test_contention_lowest_id_wins():
    scenario = scenario_from(CROSS, [
        train((2, 1), E, (2, 4)),
        train((1, 2), S, (4, 2)),
    ])
    state = placed_state(scenario, {0: ((2, 1), E), 1: ((1, 2), S)})
    state, events = step(state, {0: F, 1: F})
    assert _moves(events) == {0: (2, 2, int(E))}
    assert state.trains[1].cell == (1, 2)


def _ring(reject_cycles):
    # каждому поезду цель в его стартовой клетке
    return scenario_from(RING, [
        train((0, 1), E, (0, 0)),
        train((0, 0), N, (0, 1)),
        train((0, 0), N, (1, 1)),
        train((0, 0), N, (1, 0)),
    ], reject_cycles=reject_cycles)


def _ring_state(reject_cycles):
    return placed_state(_ring(reject_cycles), {
        0: ((0, 0), N), 1: ((0, 1), E), 2: ((1, 1), S), 3: ((1, 0), W),
    })


def test_cycle_rejected_by_default():
    state = _ring_state(True)
    assert detect_deadlocks(state.grid, state) == {0, 1, 2, 3}
    state, events = step(state, {i: F for i in range(4)})
    assert _moves(events) == {}


def test_cycle_rotates_when_allowed():
    state = _ring_state(False)
    state, events = step(state, {i: F for i in range(4)})
    assert _moves(events) == {
        0: (0, 1, int(E)), 1: (1, 1, int(S)), 2: (1, 0, int(W)), 3: (0, 0, int(N)),
    }


def test_head_on_deadlock_and_closure():
    state = placed_state(_corridor_pair(), {0: ((0, 3), E), 1: ((0, 4), W), 2: ((0, 2), E)})
    assert detect_deadlocks(state.grid, state) == {0, 1, 2}
    free = placed_state(_corridor_pair(), {0: ((0, 3), E), 1: ((0, 5), W)})
    assert detect_deadlocks(free.grid, free) == set()


def test_dispatch_into_vacated_origin():
    scenario = scenario_from(corridor(8), [
        train((0, 1), E, (0, 7)),
        train((0, 1), E, (0, 6)),
    ])
    state = placed_state(scenario, {0: ((0, 1), E)})
    state, events = step(state, {0: F, 1: F})
    assert state.trains[1].status == TrainStatus.ACTIVE
    assert state.trains[1].cell == (0, 1)
    assert state.trains[1].departed == 0
    assert [e.kind for e in events.events if e.train == 1] == ["ready", "dispatch"]


def test_dispatch_blocked_when_origin_held():
    scenario = scenario_from(corridor(8), [
        train((0, 1), E, (0, 7)),
        train((0, 1), E, (0, 6)),
    ])
    state = placed_state(scenario, {0: ((0, 1), E)})
    state, events = step(state, {0: STOP, 1: F})
    assert state.trains[1].status == TrainStatus.READY_OFF_MAP
    assert events.of_kind("dispatch_blocked")


def test_arrival_leaves_the_grid():
    scenario = scenario_from(corridor(8), [train((0, 1), E, (0, 5))])
    state = placed_state(scenario, {0: ((0, 4), E)})
    state.clock = 3
    state, events = step(state, {0: F})
    t = state.trains[0]
    assert t.status == TrainStatus.ARRIVED
    assert t.arrived == 4
    assert t.cell is None
    assert state.done


def test_fractional_speed_moves_every_other_tick():
    scenario = scenario_from(corridor(8), [train((0, 1), E, (0, 7), speed=0.5)])
    state = placed_state(scenario, {0: ((0, 1), E)})
    cells = []
    for _ in range(4):
        state, _ = step(state, {0: F})
        cells.append(state.trains[0].cell)
    assert cells == [(0, 1), (0, 2), (0, 2), (0, 3)]


def test_noop_keeps_moving_and_stop_holds():
    scenario = scenario_from(corridor(8), [train((0, 1), E, (0, 7))])
    state = placed_state(scenario, {0: ((0, 1), E)})
    state, _ = step(state, {0: NOOP})
    assert state.trains[0].cell == (0, 2)
    state, _ = step(state, {0: STOP})
    state, _ = step(state, {0: NOOP})
    assert state.trains[0].cell == (0, 2)


def test_horizon_cancels_off_map_trains():
    scenario = scenario_from(corridor(8), [train((0, 1), E, (0, 7), ed=0, sched=5)], t_max=5)
    state = reset(scenario, 0)
    events = None
    while not state.done:
        state, events = step(state, {0: NOOP})
    assert state.clock == 5
    assert state.trains[0].status == TrainStatus.CANCELLED_AT_END
    assert events.of_kind("cancel")
    with pytest.raises(SimulationError):
        step(state, {})


def test_malfunction_freezes_train():
    scenario = scenario_from(corridor(8), [train((0, 1), E, (0, 7))],
                             malfunction_rate=1.0, malfunction_duration=(3, 3))
    state = placed_state(scenario, {0: ((0, 1), E)})
    state, events = step(state, {0: F})
    assert events.of_kind("malfunction_start")[0].value == 3
    assert state.trains[0].cell == (0, 1)
    assert state.trains[0].malfunction == 2


def test_snapshot_restore_replays_identically():
    scenario = scenario_from(corridor(10), [
        train((0, 1), E, (0, 9)),
        train((0, 8), W, (0, 0)),
    ], malfunction_rate=0.2, malfunction_duration=(1, 3))
    state = reset(scenario, 5)
    state, _ = step(state, {0: F, 1: NOOP})
    token = snapshot(state)

    def play(s):
        out = []
        for _ in range(6):
            if s.done:
                break
            s, ev = step(s, {0: F, 1: F})
            out.append(ev.to_records())
        return out

    first = play(restore(token))
    second = play(restore(token))
    assert first == second
    # слепок не меняется при игре с восстановленной копией
    assert restore(token).clock == 1


def test_malfunction_durations_and_onset_rate():
    rate, (lo, hi) = 0.1, (2, 5)
    scenario = scenario_from(corridor(10), [
        train((0, 1), E, (0, 9)),
        train((0, 4), E, (0, 9)),
        train((0, 7), E, (0, 9)),
    ], t_max=400, malfunction_rate=rate, malfunction_duration=(lo, hi))
    state = placed_state(scenario, {0: ((0, 1), E), 1: ((0, 4), E), 2: ((0, 7), E)})
    opportunities = onsets = 0
    started: dict[int, tuple[int, int]] = {}
    while not state.done:
        opportunities += sum(1 for t in state.trains if t.malfunction == 0)
        state, events = step(state, {tid: STOP for tid in range(3)})
        for e in events.of_kind("malfunction_start"):
            assert lo <= e.value <= hi
            started[e.train] = (events.clock, e.value)
            onsets += 1
        for e in events.of_kind("malfunction_end"):
            clock, duration = started.pop(e.train)
            # поезд стоит ровно duration тактов, включая такт начала
            assert events.clock - clock == duration - 1
    expected = opportunities * rate
    assert abs(onsets - expected) <= 3 * (opportunities * rate * (1 - rate)) ** 0.5
