import pytest

from app.core.errors import ControlError
from app.core.simulator import TrainStatus, reset
from app.schemas.control import MctsConfig
from app.services.mcts import episode_return, mcts_decide
from app.services.policies import MadsAction
from app.services.runner import run_method
from builders import E, W, corridor, placed_state, scenario_from, train


def _lone():
    return scenario_from(corridor(10), [train((0, 1), E, (0, 8))])


def _head_on(second_departure=0):
    return scenario_from(corridor(10), [
        train((0, 1), E, (0, 8)),
        train((0, 8), W, (0, 1), ed=second_departure),
    ])


def test_lone_train_is_dispatched():
    state = reset(_lone(), 0)
    result = mcts_decide(state, 0, MctsConfig(budget=20))
    assert result.action == MadsAction.DISPATCH
    assert result.visits[MadsAction.DISPATCH] > result.visits[MadsAction.WAIT]


def test_waits_for_oncoming_train():
    state = placed_state(_head_on(), {0: ((0, 3), E)})
    result = mcts_decide(state, 1, MctsConfig(budget=20))
    assert result.action == MadsAction.WAIT
    assert result.values[MadsAction.WAIT] > result.values[MadsAction.DISPATCH]


@pytest.mark.parametrize("repeat", range(3))
def test_full_budget_choices_are_stable(repeat):
    lone = mcts_decide(reset(_lone(), 0), 0, MctsConfig(budget=100))
    assert lone.action == MadsAction.DISPATCH
    head_on = mcts_decide(placed_state(_head_on(), {0: ((0, 3), E)}), 1, MctsConfig(budget=100))
    assert head_on.action == MadsAction.WAIT
    assert head_on.visits[MadsAction.WAIT] > head_on.visits[MadsAction.DISPATCH]


def test_visits_sum_to_budget():
    state = reset(_lone(), 0)
    for budget in (1, 7):
        result = mcts_decide(state, 0, MctsConfig(budget=budget))
        assert sum(result.visits.values()) == budget


def test_search_leaves_state_untouched():
    state = placed_state(_head_on(), {0: ((0, 3), E)})
    before = (state.clock, [(t.status, t.cell, t.heading) for t in state.trains])
    first = mcts_decide(state, 1, MctsConfig(budget=10))
    second = mcts_decide(state, 1, MctsConfig(budget=10))
    assert (state.clock, [(t.status, t.cell, t.heading) for t in state.trains]) == before
    assert first == second


def test_finished_train_has_no_decision():
    state = reset(_lone(), 0)
    state.trains[0].status = TrainStatus.ARRIVED
    with pytest.raises(ControlError):
        mcts_decide(state, 0, MctsConfig(budget=3))


def test_episode_return_bounds():
    config = MctsConfig()
    state = reset(_lone(), 0)
    assert episode_return(state, config.lambda_deadlock, config.lambda_delay) == 0.0

    state.trains[0].status = TrainStatus.ARRIVED
    state.trains[0].arrived = 8
    assert episode_return(state, config.lambda_deadlock, config.lambda_delay) == pytest.approx(1.0)


def test_mcts_controller_resolves_head_on():
    trace = run_method(_head_on(second_departure=2), "mcts", 0, budget=8)
    assert trace.footer.metrics["success"] == 2
    assert trace.footer.metrics["deadlock"] == 0
