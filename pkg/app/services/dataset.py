# Выгрузка решений контроллера для обучения с учителем (JSON lines + манифест)
import json
import logging
from pathlib import Path
from typing import Iterable, Iterator, Literal

from pydantic import BaseModel, Field, ValidationError
from tqdm import tqdm

from app.core.errors import DatasetError
from app.core.simulator import TrainStatus, reset, step
from app.schemas.control import ControllerConfig
from app.schemas.scenario import Scenario
from app.services.control import DecisionController
from app.services.observations import DISPATCH_LAYOUT_VERSION, LAYOUT_VERSION

logger = logging.getLogger(__name__)

EXPECTED_LAYOUTS = {"dispatch": DISPATCH_LAYOUT_VERSION, "routing": LAYOUT_VERSION}


class BcSample(BaseModel):
    phase: Literal["dispatch", "routing"]
    layout_version: str
    observation: list[float]
    action: int
    train: int
    episode: str
    success: bool


class DatasetManifest(BaseModel):
    episodes: int = 0
    samples: dict[str, int] = Field(default_factory=lambda: {"dispatch": 0, "routing": 0})
    dropped: int = 0
    filter_failed: bool = False
    layout_versions: dict[str, str] = Field(default_factory=lambda: dict(EXPECTED_LAYOUTS))

    @property
    def total(self) -> int:
        return sum(self.samples.values())


class DatasetWriter:
    """Дописывает образцы в файл; смешивание версий раскладки запрещено"""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            self._check_existing()
        self._fh = None

    def _check_existing(self) -> None:
        with self.path.open(encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DatasetError(f"{self.path}:{n}: not a JSON record") from e
                self._check_layout(record.get("phase"), record.get("layout_version"))

    @staticmethod
    def _check_layout(phase, version) -> None:
        if EXPECTED_LAYOUTS.get(phase) != version:
            raise DatasetError(
                f"layout version {version!r} for phase {phase!r} does not match {EXPECTED_LAYOUTS.get(phase)!r}"
            )

    def append(self, sample: BcSample) -> None:
        self._check_layout(sample.phase, sample.layout_version)
        try:
            if self._fh is None:
                self._fh = self.path.open("a", encoding="utf-8")
            self._fh.write(sample.model_dump_json() + "\n")
        except OSError as e:
            raise DatasetError(f"cannot write {self.path}: {e}") from e

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def episode_samples(scenario: Scenario, config: ControllerConfig, seed: int,
                    filter_failed: bool) -> tuple[list[BcSample], int, int]:
    """Один эпизод: (образцы, отброшено, число запросов к политикам)"""
    controller = DecisionController(scenario, config, seed, record=True)
    state = reset(scenario, seed)
    while not state.done:
        state, _ = step(state, controller.control_step(state))
    succeeded = {t.train for t in state.trains if t.status == TrainStatus.ARRIVED}
    episode_id = f"{scenario.name}/seed{seed}"
    samples, dropped = [], 0
    for record in controller.decision_log:
        ok = record.train in succeeded
        if filter_failed and not ok:
            dropped += 1
            continue
        samples.append(BcSample(
            phase=record.phase.value,
            layout_version=EXPECTED_LAYOUTS[record.phase.value],
            observation=[float(x) for x in record.observation],
            action=record.action,
            train=record.train,
            episode=episode_id,
            success=ok,
        ))
    queries = sum(controller.stats.queries.values())
    return samples, dropped, queries


def collect_bc_dataset(
    episodes: Iterable[tuple[Scenario, int]],
    config: ControllerConfig,
    out_path: Path,
    filter_failed: bool = False,
    progress: bool = False,
) -> DatasetManifest:
    """Эпизоды (сценарий, seed) под контроллером; образцы пишутся по мере прогона"""
    manifest = DatasetManifest(filter_failed=filter_failed)
    with DatasetWriter(out_path) as writer:
        for scenario, seed in tqdm(list(episodes), desc="collect", disable=not progress):
            samples, dropped, _ = episode_samples(scenario, config, seed, filter_failed)
            for sample in samples:
                writer.append(sample)
                manifest.samples[sample.phase] += 1
            manifest.dropped += dropped
            manifest.episodes += 1
    Path(out_path).touch()
    manifest_path = Path(out_path).with_suffix(".manifest.json")
    manifest_path.write_text(manifest.model_dump_json(indent=1), encoding="utf-8")
    if manifest.total == 0:
        logger.warning(f"⚠️ Набор данных пуст: все образцы отброшены ({manifest.dropped})")
    else:
        logger.info(f"✅ Набор данных: {manifest.samples}, отброшено {manifest.dropped}")
    return manifest


def read_samples(path: Path) -> Iterator[BcSample]:
    with Path(path).open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield BcSample.model_validate_json(line)
            except ValidationError as e:
                raise DatasetError(f"{path}:{n}: {e}") from e
