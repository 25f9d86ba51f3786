import numpy as np
import pytest

from app.core.errors import ControlError
from app.core.simulator import TrainStatus, reset, step
from app.schemas.control import preset
from app.services.control import DecisionController, translate
from app.services.levels import build_scenario, level_spec
from app.services.observations import (
    LAYOUT_VERSION,
    FeatureLayout53,
    ObservationContext,
    build_dispatch_obs,
    build_routing_obs,
)
from app.services.policies import MadsAction, MapfAction, heuristic_mads, heuristic_mapf
from builders import SIDING, E, W, placed_state, scenario_from, train


def _siding(placements):
    scenario = scenario_from(SIDING, [
        train((1, 1), E, (1, 10)),
        train((1, 10), W, (1, 1)),
    ], t_max=80)
    return placed_state(scenario, placements)


def test_layout_has_53_named_features():
    assert FeatureLayout53.SIZE == 53
    assert len(set(FeatureLayout53.NAMES)) == 53
    assert FeatureLayout53.index("valid") == 0
    assert FeatureLayout53.NAMES[FeatureLayout53.index("alt_usable")] == "alt_usable"


def test_opposing_train_on_segment_means_stop():
    state = _siding({0: ((1, 5), E), 1: ((1, 7), W)})
    ctx = ObservationContext(state)
    obs = build_routing_obs(ctx, 0)
    assert obs.rows.shape == (3, 53)
    assert obs.layout_version == LAYOUT_VERSION
    assert obs.feature(0, "opposing_on_segment") == 1.0
    assert round(obs.feature(0, "dist_opposing") * state.t_max) == 2
    assert obs.neighbours[0] == 1
    assert obs.feature(1, "valid") == 1.0 and obs.feature(1, "is_self") == 0.0
    assert list(obs.action_mask) == [True, False, True]
    assert heuristic_mapf(obs, obs.action_mask, stop_window=5, t_max=state.t_max) == MapfAction.STOP


def test_free_loop_means_deviate_at_switch():
    state = _siding({0: ((1, 3), E), 1: ((1, 6), W)})
    ctx = ObservationContext(state)
    obs = build_routing_obs(ctx, 0)
    assert list(obs.action_mask) == [True, True, True]
    assert obs.feature(0, "at_decision_point") == 1.0
    assert obs.feature(0, "short_first_conflict_opposing") == 1.0
    assert obs.feature(0, "alt_usable") == 1.0
    action = heuristic_mapf(obs, obs.action_mask, stop_window=5, t_max=state.t_max)
    assert action == MapfAction.DEVIATE
    # отклонение на петлю: налево с восточного направления
    assert translate(state, 0, action, ctx).name == "LEFT"


def test_clear_route_means_planned():
    state = _siding({0: ((1, 3), E)})
    obs = build_routing_obs(ObservationContext(state), 0)
    assert obs.neighbours == (None, None)
    assert not obs.rows[1].any() and not obs.rows[2].any()
    assert heuristic_mapf(obs, obs.action_mask, 5, state.t_max) == MapfAction.PLANNED


def test_dispatch_waits_for_conflicting_active_train():
    state = _siding({0: ((1, 5), E)})
    obs = build_dispatch_obs(ObservationContext(state), 1)
    assert obs.global_features.shape == (5,)
    assert obs.conflicts.shape == (2, 2, 3)
    assert obs.active_mask.tolist() == [True, False]
    assert obs.projections[(0, 0)].n_conflict_cells > 0
    assert heuristic_mads(obs, window=10) == MadsAction.WAIT

    empty = _siding({})
    obs = build_dispatch_obs(ObservationContext(empty), 1)
    assert obs.projections == {}
    assert heuristic_mads(obs, window=10) == MadsAction.DISPATCH


def test_wrong_phase_observations_raise():
    state = _siding({0: ((1, 5), E)})
    ctx = ObservationContext(state)
    with pytest.raises(ControlError):
        build_routing_obs(ctx, 1)
    with pytest.raises(ControlError):
        build_dispatch_obs(ctx, 0)


@pytest.mark.parametrize("seed", [0, 1])
def test_observation_contract_under_random_play(seed):
    scenario = build_scenario(level_spec(0), seed)
    controller = DecisionController(scenario, preset("random"), seed)
    state = reset(scenario, seed)
    checked = 0
    for _ in range(150):
        if state.done:
            break
        ctx = ObservationContext(state)
        for t in state.trains:
            if t.status == TrainStatus.ACTIVE:
                obs = build_routing_obs(ctx, t.train)
                assert obs.rows.shape == (3, 53)
                assert np.isfinite(obs.rows).all()
                assert obs.rows.min() >= 0.0 and obs.rows.max() <= 1.0
                checked += 1
            elif t.status.off_map:
                obs = build_dispatch_obs(ctx, t.train)
                assert obs.global_features.shape == (5,)
                assert obs.global_features.min() >= 0.0 and obs.global_features.max() <= 1.0
                assert obs.conflicts.min() >= 0.0 and obs.conflicts.max() <= 1.0
        state, _ = step(state, controller.control_step(state))
    assert checked > 0
