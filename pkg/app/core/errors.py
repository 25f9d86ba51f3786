# Исключения предметной области


class RailflowError(Exception):
    """Базовая ошибка: CLI превращает её в код выхода 1"""


class GridError(RailflowError):
    pass


class MapGenerationError(RailflowError):
    def __init__(self, message: str, seed: int):
        super().__init__(f"{message} (seed={seed})")
        self.seed = seed


class PlacementError(RailflowError):
    """Неудачная попытка размещения городов; повторяется генератором"""


class ScenarioError(RailflowError):
    pass


class SimulationError(RailflowError):
    pass


class RouteError(RailflowError):
    pass


class ControlError(RailflowError):
    def __init__(self, message: str, train: int | None = None):
        prefix = f"train {train}: " if train is not None else ""
        super().__init__(prefix + message)
        self.train = train


class TraceError(RailflowError):
    def __init__(self, message: str, tick: int | None = None):
        super().__init__(message if tick is None else f"{message} (tick {tick})")
        self.tick = tick


class DatasetError(RailflowError):
    pass
