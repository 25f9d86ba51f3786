# Контроллер решений: маски, пропуск решений, перевод в сырые действия
import logging
import math
from dataclasses import dataclass, field
import numpy as np

from app.core.errors import ControlError
from app.core.rail import Heading, Pose
from app.core.routing import distance_to_target
from app.core.simulator import RawAction, SimState, TrainStatus
from app.schemas.control import ControllerConfig
from app.schemas.scenario import Scenario
from app.services.observations import ObservationContext, route_view, routing_action_mask, scan_poses
from app.services.policies import DecisionRequest, MadsAction, MapfAction, Phase, make_policy

logger = logging.getLogger(__name__)


# --- маски -----------------------------------------------------------------

def mads_mask(state: SimState, train: int) -> bool:
    """True, если нужно решение диспетчера; False: пропуск (подразумевается Wait)"""
    t = state.trains[train]
    if not t.status.off_map:
        raise ControlError("dispatch mask requested for an on-map train", train)
    entry = state.scenario.trains[train]
    if state.clock < entry.earliest_departure or t.malfunction > 0:
        return False
    cost = distance_to_target(state.grid, entry.origin_pose, tuple(entry.target))
    if cost is None:
        return False
    return math.ceil(cost / entry.speed_fraction) <= state.remaining()


def mapf_mask(state: SimState, train: int, ctx: ObservationContext | None = None) -> tuple[bool, np.ndarray]:
    """(нужно ли решение, маска [Planned, Deviate, Stop])"""
    t = state.trains[train]
    if t.status != TrainStatus.ACTIVE:
        raise ControlError("routing mask requested for an off-map train", train)
    ctx = ctx or ObservationContext(state)
    view = route_view(ctx, train)
    mask = routing_action_mask(ctx, train, view)
    at_or_entering_dp = view.dp_index in (0, 1)
    hits = scan_poses(ctx, train, view.segment[1:], t.pose.cell, 1)
    opposing = any(h.opposing for h in hits)
    return at_or_entering_dp or opposing, mask


# --- перевод в сырые действия ---------------------------------------------

def relative_action(pose: Pose, out: Heading) -> RawAction:
    if out == pose.heading.left():
        return RawAction.LEFT
    if out == pose.heading.right():
        return RawAction.RIGHT
    # прямо, а также разворот в тупике: единственный выход
    return RawAction.FORWARD


def translate(state: SimState, train: int, action, ctx: ObservationContext | None = None) -> RawAction:
    if isinstance(action, MadsAction):
        return RawAction.FORWARD if action == MadsAction.DISPATCH else RawAction.NOOP
    action = MapfAction(action)
    if action == MapfAction.STOP:
        return RawAction.STOP
    ctx = ctx or ObservationContext(state)
    pose = state.trains[train].pose
    route = ctx.route_of(train)
    if route is None or len(route) < 2:
        raise ControlError("no planned route to translate", train)
    if action == MapfAction.PLANNED:
        ctx.intents[train] = route[1].cell
        return relative_action(pose, route[1].heading)
    view = route_view(ctx, train)
    if view.dp_index != 0 or view.alt is None:
        raise ControlError("deviate requested away from a decision point", train)
    ctx.intents[train] = view.alt.entry.cell
    return relative_action(pose, view.alt.entry.heading)


# --- контроллер ------------------------------------------------------------

@dataclass
class DecisionStats:
    ticks: int = 0
    queries: dict[str, int] = field(default_factory=lambda: {"dispatch": 0, "routing": 0})
    skipped: dict[str, int] = field(default_factory=lambda: {"dispatch": 0, "routing": 0})
    observations_built: int = 0

    def to_dict(self) -> dict:
        return {
            "ticks": self.ticks,
            "queries": dict(self.queries),
            "skipped": dict(self.skipped),
            "observations_built": self.observations_built,
        }


@dataclass
class DecisionRecord:
    clock: int
    train: int
    phase: Phase
    action: int
    observation: np.ndarray


class DecisionController:
    """Цикл иерархического управления: поезда вне сети -> MADS, в сети -> MAPF"""

    def __init__(
        self,
        scenario: Scenario,
        config: ControllerConfig,
        seed: int = 0,
        record: bool = False,
    ):
        self.scenario = scenario
        self.config = config
        self.mads = make_policy(config.mads)
        self.mapf = make_policy(config.mapf)
        self.rng = np.random.default_rng(seed)
        self.stats = DecisionStats()
        self.record = record
        self.decision_log: list[DecisionRecord] = []

    def control_step(self, state: SimState) -> dict[int, RawAction]:
        if state.done:
            raise ControlError("control step on a finished episode")
        ctx = ObservationContext(state, self.config.top_k)
        joint: dict[int, RawAction] = {}
        routed: dict[int, Phase] = {}
        for t in state.trains:
            if t.status.terminal:
                continue
            if t.status.off_map:
                routed[t.train] = Phase.DISPATCH
                joint[t.train] = self._dispatch(ctx, t.train)
            else:
                routed[t.train] = Phase.ROUTING
                joint[t.train] = self._route(ctx, t.train)
        # каждый нетерминальный поезд обслужен ровно одной политикой по своему статусу
        assert all(
            (routed[tid] == Phase.DISPATCH) == state.trains[tid].status.off_map for tid in routed
        ), "train routed to the wrong policy"
        assert len(routed) == sum(1 for t in state.trains if not t.status.terminal)
        self.stats.ticks += 1
        return joint

    def _request(self, ctx, train, phase, mask, skip_eligible=False) -> DecisionRequest:
        return DecisionRequest(ctx.state, train, phase, mask, ctx, self.rng, skip_eligible)

    def _ask(self, policy, request: DecisionRequest) -> int:
        self.stats.queries[request.phase.value] += 1
        action = policy.choose(request)
        if self.record and not request.skip_eligible:
            self.decision_log.append(DecisionRecord(
                request.state.clock, request.train, request.phase, action, request.observation.flat(),
            ))
        if request.observation_built:
            self.stats.observations_built += 1
        return action

    def _dispatch(self, ctx: ObservationContext, train: int) -> RawAction:
        needed = mads_mask(ctx.state, train)
        mask = np.array([needed, True])
        if not needed:
            self.stats.skipped["dispatch"] += 1
            if self.config.skip_enabled:
                return RawAction.NOOP
            action = self._ask(self.mads, self._request(ctx, train, Phase.DISPATCH, mask, True))
        else:
            action = self._ask(self.mads, self._request(ctx, train, Phase.DISPATCH, mask))
        return translate(ctx.state, train, MadsAction(action), ctx)

    def _route(self, ctx: ObservationContext, train: int) -> RawAction:
        needed, mask = mapf_mask(ctx.state, train, ctx)
        if not needed:
            self.stats.skipped["routing"] += 1
            if self.config.skip_enabled:
                return translate(ctx.state, train, MapfAction.PLANNED, ctx)
            mask = np.array([True, False, True])
            action = self._ask(self.mapf, self._request(ctx, train, Phase.ROUTING, mask, True))
        else:
            action = self._ask(self.mapf, self._request(ctx, train, Phase.ROUTING, mask))
        return translate(ctx.state, train, MapfAction(action), ctx)


def controller_for(scenario: Scenario, config: ControllerConfig, seed: int = 0, record: bool = False) -> DecisionController:
    logger.debug(f"Контроллер {config.name}: MADS={config.mads.name}, MAPF={config.mapf.name}")
    return DecisionController(scenario, config, seed, record)

