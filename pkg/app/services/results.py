# Хранилище результатов эпизодов: повторный запуск бенчмарка не пересчитывает готовые ячейки
import logging
from pathlib import Path
from typing import Optional

from sqlalchemy.exc import SQLAlchemyError

from app.core.database import database_url, get_db
from app.core.errors import RailflowError
from app.models.episode import EpisodeResult
from app.schemas.metrics import EpisodeMetrics

logger = logging.getLogger(__name__)


class ResultStore:
    def __init__(self, out_dir: Path | None = None, db_url: str | None = None):
        self.db_url = db_url or database_url(out_dir)

    def get(self, level: int, method: str, seed: int, config_hash: str) -> Optional[EpisodeMetrics]:
        """Метрики готового эпизода или None"""
        try:
            with get_db(self.db_url) as db:
                row = db.query(EpisodeResult).filter(
                    EpisodeResult.level == level,
                    EpisodeResult.method == method,
                    EpisodeResult.seed == seed,
                    EpisodeResult.config_hash == config_hash,
                    EpisodeResult.status == "ok",
                ).first()
                if row is None or row.metrics_json is None:
                    return None
                return EpisodeMetrics.model_validate_json(row.metrics_json)
        except SQLAlchemyError as e:
            raise RailflowError(f"results store {self.db_url}: {e}") from e

    def trace_path(self, level: int, method: str, seed: int, config_hash: str) -> Optional[Path]:
        with get_db(self.db_url) as db:
            row = db.query(EpisodeResult).filter_by(
                level=level, method=method, seed=seed, config_hash=config_hash,
            ).first()
            return Path(row.trace_path) if row is not None and row.trace_path else None

    def put(self, level: int, method: str, seed: int, config_hash: str,
            metrics: EpisodeMetrics | None = None, trace_path: Path | None = None,
            error: str | None = None) -> None:
        """Вставка или замена записи (уникальна по уровню, методу, seed и хэшу конфигурации)"""
        try:
            with get_db(self.db_url) as db:
                row = db.query(EpisodeResult).filter_by(
                    level=level, method=method, seed=seed, config_hash=config_hash,
                ).first()
                if row is None:
                    row = EpisodeResult(level=level, method=method, seed=seed, config_hash=config_hash)
                    db.add(row)
                row.status = "failed" if error else "ok"
                row.metrics_json = metrics.model_dump_json() if metrics is not None else None
                row.trace_path = str(trace_path) if trace_path is not None else None
                row.error = error
        except SQLAlchemyError as e:
            raise RailflowError(f"results store {self.db_url}: {e}") from e

    def failed_seeds(self, level: int, method: str, config_hash: str) -> list[int]:
        with get_db(self.db_url) as db:
            rows = db.query(EpisodeResult.seed).filter_by(
                level=level, method=method, config_hash=config_hash, status="failed",
            ).all()
            return sorted(seed for (seed,) in rows)

    def summary(self) -> dict[str, int]:
        with get_db(self.db_url) as db:
            total = db.query(EpisodeResult).count()
            failed = db.query(EpisodeResult).filter_by(status="failed").count()
        return {"total": total, "failed": failed}
