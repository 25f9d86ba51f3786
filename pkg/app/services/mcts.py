# MCTS для решений одного поезда; остальные поезда в розыгрышах следуют эвристикам
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from app.core.errors import ControlError, SimulationError
from app.core.routing import detect_deadlocks
from app.core.simulator import SimSnapshot, SimState, TrainStatus, restore, snapshot, step
from app.schemas.control import MctsConfig, preset
from app.services.control import DecisionController, mads_mask, mapf_mask, translate
from app.services.observations import ObservationContext
from app.services.policies import (
    DecisionRequest,
    HeuristicPolicy,
    MadsAction,
    MapfAction,
    Phase,
    Policy,
)

logger = logging.getLogger(__name__)


def episode_return(state: SimState, lambda_deadlock: float, lambda_delay: float) -> float:
    """success − λd·доля блокировок − λdelay·средняя нормированная задержка.

    Задержка обрезана моментом конца розыгрыша: для неприбывших поездов
    используется текущий такт.
    """
    n = len(state.trains)
    arrived = sum(1 for t in state.trains if t.status == TrainStatus.ARRIVED)
    deadlocked = len(detect_deadlocks(state.grid, state))
    delays = []
    for t in state.trains:
        sched = state.scenario.trains[t.train].scheduled_arrival
        actual = t.arrived if t.arrived is not None else state.clock
        delays.append(max(0, actual - sched) / state.t_max)
    return arrived / n - lambda_deadlock * deadlocked / n - lambda_delay * float(np.mean(delays))


@dataclass
class Node:
    snapshot: SimSnapshot
    actions: tuple[Optional[int], ...]
    priors: np.ndarray
    terminal: bool = False
    visits: int = 0
    action_visits: dict = field(default_factory=dict)
    action_values: dict = field(default_factory=dict)
    children: dict = field(default_factory=dict)

    def q(self, action) -> float:
        n = self.action_visits.get(action, 0)
        return self.action_values.get(action, 0.0) / n if n else 0.0

    def select(self, c: float):
        sqrt_n = math.sqrt(self.visits)

        def score(i):
            a = self.actions[i]
            u = c * self.priors[i] * sqrt_n / (1 + self.action_visits.get(a, 0))
            # равные оценки: больший приор, затем меньший индекс действия
            return self.q(a) + u, self.priors[i], -i

        return self.actions[max(range(len(self.actions)), key=score)]


@dataclass
class MctsResult:
    action: int
    visits: dict[int, int]
    values: dict[int, float]


class _Search:
    def __init__(self, root: SimState, train: int, config: MctsConfig, conflict_window: int | None,
                 stop_window: int | None):
        self.train = train
        self.config = config
        self.limit = min(root.clock + config.depth, root.t_max)
        rollout_config = preset("full", conflict_window=conflict_window, stop_window=stop_window)
        self.rollout = DecisionController(root.scenario, rollout_config)
        self.heuristic = HeuristicPolicy(conflict_window, stop_window)
        self.rng = np.random.default_rng(0)

    def finished(self, state: SimState) -> bool:
        return state.done or state.clock >= self.limit

    def options(self, state: SimState) -> tuple[tuple[Optional[int], ...], np.ndarray, Optional[Phase]]:
        """Действия решающего поезда в состоянии: маскированные либо одно подразумеваемое"""
        t = state.trains[self.train]
        if t.status.terminal:
            return (None,), np.ones(1), None
        ctx = ObservationContext(state)
        if t.status.off_map:
            phase = Phase.DISPATCH
            needed = mads_mask(state, self.train)
            mask = np.array([needed, True])
        else:
            phase = Phase.ROUTING
            needed, mask = mapf_mask(state, self.train, ctx)
        if not needed:
            return (int(phase.default),), np.ones(1), phase
        request = DecisionRequest(state, self.train, phase, mask, ctx, self.rng)
        priors = self.heuristic.priors(request)
        legal = np.flatnonzero(mask)
        return tuple(int(a) for a in legal), priors[legal] / priors[legal].sum(), phase

    def make_node(self, state: SimState) -> Node:
        if self.finished(state):
            return Node(snapshot(state), (None,), np.ones(1), terminal=True)
        actions, priors, _ = self.options(state)
        return Node(snapshot(state), actions, priors)

    def advance(self, state: SimState, action: Optional[int]) -> SimState:
        joint = self.rollout.control_step(state)
        t = state.trains[self.train]
        if action is not None and not t.status.terminal:
            typed = MadsAction(action) if t.status.off_map else MapfAction(action)
            joint[self.train] = translate(state, self.train, typed)
        state, _ = step(state, joint)
        return state

    def play_out(self, state: SimState) -> float:
        while not self.finished(state):
            state, _ = step(state, self.rollout.control_step(state))
        return episode_return(state, self.config.lambda_deadlock, self.config.lambda_delay)

    def simulate(self, root: Node) -> None:
        node, path = root, []
        while not node.terminal:
            action = node.select(self.config.exploration)
            path.append((node, action))
            if action in node.children:
                node = node.children[action]
                continue
            state = self.advance(restore(node.snapshot), action)
            child = self.make_node(state)
            node.children[action] = child
            value = self.play_out(state)
            break
        else:
            value = episode_return(restore(node.snapshot), self.config.lambda_deadlock, self.config.lambda_delay)
        for parent, action in path:
            parent.visits += 1
            parent.action_visits[action] = parent.action_visits.get(action, 0) + 1
            parent.action_values[action] = parent.action_values.get(action, 0.0) + value


def mcts_decide(
    state: SimState,
    train: int,
    config: MctsConfig | None = None,
    conflict_window: int | None = None,
    stop_window: int | None = None,
) -> MctsResult:
    """Фиксированный бюджет симуляций из текущего состояния; состояние не изменяется"""
    config = config or MctsConfig()
    try:
        search = _Search(state, train, config, conflict_window, stop_window)
        root = search.make_node(restore(snapshot(state)))
    except SimulationError as e:
        raise ControlError(f"snapshot failed: {e}", train) from e
    if root.terminal or root.actions == (None,):
        raise ControlError("no decision to search from", train)
    for _ in range(config.budget):
        search.simulate(root)

    visits = {a: root.action_visits.get(a, 0) for a in root.actions}
    best = max(root.actions, key=lambda a: (visits[a], -a))
    logger.debug(f"MCTS поезд {train}, такт {state.clock}: визиты {visits}, выбор {best}")
    return MctsResult(best, visits, {a: root.q(a) for a in root.actions})


class MctsPolicy(Policy):
    name = "mcts"

    def __init__(self, conflict_window: int | None = None, stop_window: int | None = None, **params):
        self.config = MctsConfig(**params)
        self.conflict_window = conflict_window
        self.stop_window = stop_window
        self.heuristic = HeuristicPolicy(conflict_window, stop_window)
        super().__init__(**params)

    def decide(self, request: DecisionRequest) -> int:
        result = mcts_decide(request.state, request.train, self.config, self.conflict_window, self.stop_window)
        if not request.mask[result.action]:
            # маска запроса строже внутренней: берём разрешённое действие с наибольшим числом визитов
            legal = [a for a in result.visits if request.mask[a]]
            return max(legal, key=lambda a: (result.visits[a], -a))
        return result.action

    def priors(self, request: DecisionRequest) -> np.ndarray:
        return self.heuristic.priors(request)
