import numpy as np
import pytest

from app.core.errors import ControlError
from app.core.rail import Pose
from app.core.routing import detect_deadlocks
from app.core.simulator import RawAction, reset, step
from app.schemas.control import PolicySpec, preset
from app.services.control import DecisionController, mads_mask, mapf_mask, translate
from app.services.levels import build_scenario, level_spec
from app.services.observations import ObservationContext, build_routing_obs
from app.services.policies import DecisionRequest, MadsAction, MapfAction, Phase, Policy, heuristic_mapf, make_policy
from app.services.runner import run_method
from builders import SIDING, E, W, corridor, placed_state, run_to_end, scenario_from, train


def _head_on(second_departure=2):
    return scenario_from(corridor(10), [
        train((0, 1), E, (0, 8)),
        train((0, 8), W, (0, 1), ed=second_departure),
    ], t_max=60)


def test_dispatch_mask_windows():
    scenario = scenario_from(corridor(10), [train((0, 1), E, (0, 8), ed=2, sched=10)], t_max=10)
    state = reset(scenario, 0)
    assert not mads_mask(state, 0)          # до раннего отправления
    state.clock = 2
    assert mads_mask(state, 0)
    state.clock = 4                         # 7 шагов не успеть за 6 тактов
    assert not mads_mask(state, 0)
    state.clock = 2
    state.trains[0].malfunction = 3
    assert not mads_mask(state, 0)


def test_masks_reject_wrong_phase():
    state = placed_state(_head_on(), {0: ((0, 3), E)})
    with pytest.raises(ControlError):
        mads_mask(state, 0)
    with pytest.raises(ControlError):
        mapf_mask(state, 1)


def test_routing_decision_skipped_on_plain_track():
    state = placed_state(_head_on(), {0: ((0, 3), E)})
    needed, mask = mapf_mask(state, 0)
    assert not needed
    assert list(mask) == [True, False, True]


def test_routing_decision_needed_near_switch_or_opposing():
    siding = scenario_from(SIDING, [train((1, 1), E, (1, 10)), train((1, 10), W, (1, 1))])
    assert mapf_mask(placed_state(siding, {0: ((1, 2), E)}), 0)[0]
    assert mapf_mask(placed_state(siding, {0: ((1, 3), E)}), 0)[0]
    assert not mapf_mask(placed_state(siding, {0: ((1, 4), E)}), 0)[0]
    assert mapf_mask(placed_state(siding, {0: ((1, 4), E), 1: ((1, 6), W)}), 0)[0]


def test_translate_actions():
    state = placed_state(_head_on(), {0: ((0, 3), E)})
    ctx = ObservationContext(state)
    assert translate(state, 1, MadsAction.DISPATCH, ctx) == RawAction.FORWARD
    assert translate(state, 1, MadsAction.WAIT, ctx) == RawAction.NOOP
    assert translate(state, 0, MapfAction.PLANNED, ctx) == RawAction.FORWARD
    assert translate(state, 0, MapfAction.STOP, ctx) == RawAction.STOP
    with pytest.raises(ControlError):
        translate(state, 0, MapfAction.DEVIATE, ctx)


def test_no_observations_before_departure():
    scenario = scenario_from(corridor(10), [train((0, 1), E, (0, 8), ed=10)], t_max=60)
    controller = DecisionController(scenario, preset("full"))
    state = reset(scenario, 0)
    for _ in range(5):
        joint = controller.control_step(state)
        assert joint == {0: RawAction.NOOP}
        state, _ = step(state, joint)
    assert controller.stats.observations_built == 0
    assert controller.stats.skipped["dispatch"] == 5
    assert controller.stats.queries["dispatch"] == 0


def test_skipping_does_not_change_the_episode():
    scenario = build_scenario(level_spec(0), seed=3)
    skipping = DecisionController(scenario, preset("full"), 3)
    asking = DecisionController(scenario, preset("full", skip_enabled=False), 3)
    a = [ev.to_records() for ev in run_to_end(reset(scenario, 3), skipping)]
    b = [ev.to_records() for ev in run_to_end(reset(scenario, 3), asking)]
    assert a == b
    assert asking.stats.queries["dispatch"] > skipping.stats.queries["dispatch"]


def test_heuristic_dispatcher_avoids_head_on_deadlock():
    greedy = run_method(_head_on(), "greedy", 0).footer.metrics
    full = run_method(_head_on(), "full", 0).footer.metrics
    assert greedy["deadlock"] == 2
    assert full["success"] == 2
    assert full["deadlock"] == 0


def test_masked_action_is_a_control_error():
    class AlwaysDeviate(Policy):
        name = "always-deviate"

        def decide(self, request):
            return MapfAction.DEVIATE

    state = placed_state(_head_on(), {0: ((0, 3), E)})
    ctx = ObservationContext(state)
    rng = np.random.default_rng(0)
    mask = np.array([True, False, True])
    with pytest.raises(ControlError):
        AlwaysDeviate().choose(DecisionRequest(state, 0, Phase.ROUTING, mask, ctx, rng))
    # пропускаемое состояние: действие по умолчанию без обращения к политике
    skipped = DecisionRequest(state, 0, Phase.ROUTING, mask, ctx, rng, skip_eligible=True)
    assert AlwaysDeviate().choose(skipped) == MapfAction.PLANNED
    assert not skipped.observation_built


def test_unknown_policy_is_rejected():
    with pytest.raises(ValueError):
        PolicySpec(name="oracle")
    assert make_policy(PolicySpec(name="random")).name == "random"


def test_controller_refuses_finished_episode():
    scenario = _head_on()
    controller = DecisionController(scenario, preset("greedy"))
    state = reset(scenario, 0)
    state.done = True
    with pytest.raises(ControlError):
        controller.control_step(state)


def _siding_crossing():
    return scenario_from(SIDING, [
        train((1, 0), W, (1, 11)),
        train((1, 11), E, (1, 0)),
    ])


def test_simultaneous_siding_crossing_resolved_by_loop():
    trace = run_method(_siding_crossing(), "full", 0)
    assert trace.footer.metrics["success"] == 2
    assert trace.footer.metrics["deadlock"] == 0
    # первый поезд уходит на петлю, второй идёт по основному пути
    assert any(tick.actions[0] == RawAction.LEFT for tick in trace.ticks)
    assert not any(tick.actions == [RawAction.STOP, RawAction.STOP] for tick in trace.ticks)


def test_same_tick_decisions_shape_later_observations():
    state = placed_state(_siding_crossing(), {0: ((1, 3), E), 1: ((1, 8), W)})
    controller = DecisionController(state.scenario, preset("full"), 0)
    joint = controller.control_step(state)
    assert joint[0] == RawAction.LEFT
    assert joint[1] == RawAction.FORWARD


def test_open_switch_is_not_a_reason_to_stop():
    # встречный на основном пути и встречный на петле: отклонение разрешено, но не чисто
    scenario = scenario_from(SIDING, [
        train((1, 0), W, (1, 11)),
        train((1, 11), E, (1, 0)),
        train((0, 6), W, (1, 0)),
    ], t_max=80)
    state = placed_state(scenario, {0: ((1, 3), E), 1: ((1, 8), W), 2: ((0, 6), W)})
    ctx = ObservationContext(state)
    obs = build_routing_obs(ctx, 0)
    assert obs.feature(0, "short_first_conflict_opposing") == 1.0
    assert obs.feature(0, "alt_first_conflict_opposing") == 1.0
    assert bool(obs.action_mask[MapfAction.DEVIATE])
    assert heuristic_mapf(obs, obs.action_mask, stop_window=5, t_max=state.t_max) == MapfAction.PLANNED
    # без петли тот же встречный означает остановку
    closed = obs.action_mask.copy()
    closed[MapfAction.DEVIATE] = False
    assert heuristic_mapf(obs, closed, stop_window=5, t_max=state.t_max) == MapfAction.STOP


def test_masked_actions_leave_the_train_in_place():
    # поворот там, где маска запрещает отклонение
    state = placed_state(_head_on(), {0: ((0, 3), E)})
    _, mask = mapf_mask(state, 0)
    assert not mask[MapfAction.DEVIATE]
    state, events = step(state, {0: RawAction.LEFT})
    assert state.trains[0].pose == Pose((0, 3), E)
    assert events.of_kind("reject")

    # отправление до раннего срока и во время неисправности
    scenario = scenario_from(corridor(10), [train((0, 1), E, (0, 8), ed=3)], t_max=60)
    state = reset(scenario, 0)
    assert not mads_mask(state, 0)
    state, _ = step(state, {0: RawAction.FORWARD})
    assert state.trains[0].status.off_map and state.trains[0].pose is None

    state.clock = 3
    state.trains[0].malfunction = 4
    assert not mads_mask(state, 0)
    state, _ = step(state, {0: RawAction.FORWARD})
    assert state.trains[0].status.off_map and state.trains[0].pose is None


@pytest.mark.parametrize("seed", range(12))
def test_flagged_deadlocks_never_move_again(seed):
    scenario = build_scenario(level_spec(1), seed)
    controller = DecisionController(scenario, preset("random"), seed)
    state = reset(scenario, seed)
    frozen: dict[int, tuple] = {}
    while not state.done:
        for tid in detect_deadlocks(state.grid, state):
            frozen.setdefault(tid, state.trains[tid].pose)
        for tid, pose in frozen.items():
            assert state.trains[tid].pose == pose, f"train {tid} left a deadlock"
        state, _ = step(state, controller.control_step(state))
    for tid, pose in frozen.items():
        assert state.trains[tid].pose == pose and state.trains[tid].arrived is None
