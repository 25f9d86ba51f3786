# Политики MADS (отправление) и MAPF (маршрут): интерфейс, реестр, эвристики
import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from functools import cached_property
from typing import Optional, Union

import numpy as np

from app.config import settings
from app.core.errors import ControlError
from app.core.simulator import SimState
from app.schemas.control import PolicySpec
from app.services.observations import (
    DispatchObservation,
    ObservationContext,
    RoutingObservation,
    build_dispatch_obs,
    build_routing_obs,
)

logger = logging.getLogger(__name__)

PRIOR_WEIGHT = 0.75  # доля априорной массы на действие эвристики


class MadsAction(IntEnum):
    DISPATCH = 0
    WAIT = 1


class MapfAction(IntEnum):
    PLANNED = 0
    DEVIATE = 1
    STOP = 2


class Phase(str, Enum):
    DISPATCH = "dispatch"
    ROUTING = "routing"

    @property
    def actions(self):
        return MadsAction if self == Phase.DISPATCH else MapfAction

    @property
    def default(self) -> int:
        # действие, подразумеваемое при пропуске решения
        return MadsAction.WAIT if self == Phase.DISPATCH else MapfAction.PLANNED


@dataclass
class DecisionRequest:
    """Запрос к политике: поезд, фаза, маска и лениво построенное наблюдение"""
    state: SimState
    train: int
    phase: Phase
    mask: np.ndarray
    ctx: ObservationContext
    rng: np.random.Generator
    skip_eligible: bool = False
    _built: bool = field(default=False, repr=False)

    @cached_property
    def observation(self) -> Union[DispatchObservation, RoutingObservation]:
        self._built = True
        if self.phase == Phase.DISPATCH:
            return build_dispatch_obs(self.ctx, self.train)
        return build_routing_obs(self.ctx, self.train)

    @property
    def observation_built(self) -> bool:
        return self._built


class Policy:
    name = "base"

    def __init__(self, **params):
        self.params = params

    def decide(self, request: DecisionRequest) -> int:
        raise NotImplementedError

    def priors(self, request: DecisionRequest) -> np.ndarray:
        return uniform_priors(request.mask)

    def choose(self, request: DecisionRequest) -> int:
        """Решение с проверкой маски; на пропускаемых состояниях: действие по умолчанию"""
        if request.skip_eligible:
            return int(request.phase.default)
        try:
            action = int(self.decide(request))
        except ControlError:
            raise
        except Exception as e:
            raise ControlError(f"policy '{self.name}' failed: {e}", request.train) from e
        if not request.mask[action]:
            raise ControlError(f"policy '{self.name}' returned masked action {action}", request.train)
        return action


def uniform_priors(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=float)
    return mask / mask.sum()


def peaked_priors(mask: np.ndarray, action: int) -> np.ndarray:
    base = uniform_priors(mask) * (1 - PRIOR_WEIGHT)
    base[action] += PRIOR_WEIGHT
    return base


# --- эвристики -------------------------------------------------------------

def heuristic_mads(obs: DispatchObservation, window: int) -> MadsAction:
    """Wait, если хотя бы один кандидатный путь пересекается с активным поездом
    в пределах окна конфликта"""
    for proj in obs.projections.values():
        if proj.n_conflict_cells > 0 and min(proj.dist_self, proj.dist_other) <= window:
            return MadsAction.WAIT
    return MadsAction.DISPATCH


def heuristic_mapf(obs: RoutingObservation, mask: np.ndarray, stop_window: int, t_max: int) -> MapfAction:
    f = obs.feature
    steps = lambda name: round(f(0, name) * t_max)  # noqa: E731

    # встречный на сегменте или первым конфликтом на плановой ветке
    opposing_dist: Optional[int] = None
    if f(0, "opposing_on_segment"):
        opposing_dist = steps("dist_opposing")
    elif f(0, "short_first_conflict_opposing"):
        opposing_dist = steps("short_dist_first_conflict")
    short_bad = opposing_dist is not None or bool(f(0, "short_deadlock_on_branch"))

    alt_clean = (
        bool(mask[MapfAction.DEVIATE])
        and bool(f(0, "alt_usable"))
        and not f(0, "alt_first_conflict_opposing")
        and not f(0, "alt_deadlock_on_branch")
    )
    if opposing_dist is not None and opposing_dist <= stop_window and not mask[MapfAction.DEVIATE]:
        return MapfAction.STOP
    if short_bad and alt_clean:
        return MapfAction.DEVIATE
    return MapfAction.PLANNED


class HeuristicPolicy(Policy):
    name = "heuristic"

    def __init__(self, conflict_window: int | None = None, stop_window: int | None = None, **params):
        super().__init__(**params)
        self.conflict_window = settings.CONFLICT_WINDOW if conflict_window is None else conflict_window
        self.stop_window = settings.STOP_WINDOW if stop_window is None else stop_window

    def decide(self, request: DecisionRequest) -> int:
        if request.phase == Phase.DISPATCH:
            return heuristic_mads(request.observation, self.conflict_window)
        return heuristic_mapf(request.observation, request.mask, self.stop_window, request.ctx.t_max)

    def priors(self, request: DecisionRequest) -> np.ndarray:
        return peaked_priors(request.mask, self.decide(request))


class GreedyPolicy(Policy):
    """Всегда отправлять и всегда следовать кратчайшему маршруту"""
    name = "greedy"

    def decide(self, request: DecisionRequest) -> int:
        return MadsAction.DISPATCH if request.phase == Phase.DISPATCH else MapfAction.PLANNED


class RandomPolicy(Policy):
    name = "random"

    def decide(self, request: DecisionRequest) -> int:
        return int(request.rng.choice(np.flatnonzero(request.mask)))


def make_policy(spec: PolicySpec) -> Policy:
    if spec.name == "heuristic":
        return HeuristicPolicy(**spec.params)
    if spec.name == "greedy":
        return GreedyPolicy(**spec.params)
    if spec.name == "random":
        return RandomPolicy(**spec.params)
    if spec.name == "mcts":
        from app.services.mcts import MctsPolicy
        return MctsPolicy(**spec.params)
    if spec.name == "deadlock-avoidance":
        from app.services.baselines import DeadlockAvoidancePolicy
        return DeadlockAvoidancePolicy(**spec.params)
    raise ControlError(f"policy '{spec.name}' is not registered")
