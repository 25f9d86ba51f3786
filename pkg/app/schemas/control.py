# Конфигурации управляющего слоя: политики, контроллер решений, MCTS
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.config import settings

POLICY_NAMES = ("heuristic", "greedy", "random", "mcts", "deadlock-avoidance")


class PolicySpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    params: dict[str, Any] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _registered(cls, v: str) -> str:
        if v not in POLICY_NAMES:
            raise ValueError(f"unknown policy '{v}', expected one of {POLICY_NAMES}")
        return v


class ControllerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "custom"
    mads: PolicySpec
    mapf: PolicySpec
    skip_enabled: bool = True
    top_k: int = Field(default_factory=lambda: settings.TOP_K, ge=1)


class MctsConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    budget: int = Field(default_factory=lambda: settings.MCTS_BUDGET, ge=1)
    depth: int = Field(default_factory=lambda: settings.MCTS_DEPTH, ge=1)
    exploration: float = Field(default_factory=lambda: settings.MCTS_EXPLORATION, ge=0)
    lambda_deadlock: float = Field(default=1.0, ge=0)
    lambda_delay: float = Field(default=0.1, ge=0)


def _heuristic_params(conflict_window: int | None, stop_window: int | None) -> dict:
    return {
        "conflict_window": settings.CONFLICT_WINDOW if conflict_window is None else conflict_window,
        "stop_window": settings.STOP_WINDOW if stop_window is None else stop_window,
    }


def preset(
    name: str,
    *,
    conflict_window: int | None = None,
    stop_window: int | None = None,
    budget: int | None = None,
    skip_enabled: bool = True,
) -> ControllerConfig:
    """Готовые конфигурации контроллера (полная иерархия, абляции, базовые политики)"""
    heur = PolicySpec(name="heuristic", params=_heuristic_params(conflict_window, stop_window))
    greedy = PolicySpec(name="greedy")
    pairs = {
        "full": (heur, heur),
        "greedy": (greedy, greedy),
        "mads-greedy": (heur, greedy),
        "greedy-mapf": (greedy, heur),
        "random": (PolicySpec(name="random"), PolicySpec(name="random")),
        "deadlock-avoidance": (PolicySpec(name="deadlock-avoidance"), PolicySpec(name="deadlock-avoidance")),
    }
    if name == "mcts":
        mcts_params = MctsConfig(**({"budget": budget} if budget is not None else {})).model_dump()
        mcts_params.update(_heuristic_params(conflict_window, stop_window))
        spec = PolicySpec(name="mcts", params=mcts_params)
        return ControllerConfig(name=name, mads=spec, mapf=spec, skip_enabled=skip_enabled)
    if name not in pairs:
        raise ValueError(f"unknown controller preset '{name}'")
    mads, mapf = pairs[name]
    return ControllerConfig(name=name, mads=mads, mapf=mapf, skip_enabled=skip_enabled)


CONTROLLER_PRESETS = ("full", "greedy", "mads-greedy", "greedy-mapf", "deadlock-avoidance", "mcts", "random")
ABLATION_PRESETS = ("full", "mads-greedy", "greedy-mapf", "greedy")
# "pp" исполняет планы приоритетного планирования и не использует контроллер
METHODS = CONTROLLER_PRESETS + ("pp",)
