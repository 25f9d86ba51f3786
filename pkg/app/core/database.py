# Подключение к SQLite через SQLAlchemy (хранилище результатов бенчмарка)

from contextlib import contextmanager
from functools import lru_cache
from pathlib import Path

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker

from app.config import settings

Base = declarative_base()


def database_url(out_dir: Path | None = None) -> str:
    """RAILFLOW_DATABASE_URL или results.sqlite в каталоге бенчмарка"""
    if settings.DATABASE_URL:
        return settings.DATABASE_URL
    out_dir = Path(out_dir or "runs")
    return f"sqlite:///{out_dir / 'results.sqlite'}"


@lru_cache(maxsize=8)
def get_engine(db_url: str) -> Engine:
    if db_url.startswith("sqlite"):
        # Если нужно, создаём директорию для файла базы данных
        sqlite_path = db_url.split("///")[-1]
        Path(sqlite_path).parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(db_url, connect_args={"check_same_thread": False} if db_url.startswith("sqlite") else {})
    # модели регистрируются импортом пакета
    from app.models import base  # noqa: F401
    Base.metadata.create_all(bind=engine)
    return engine


@contextmanager
def get_db(db_url: str):
    session = sessionmaker(autocommit=False, autoflush=False, bind=get_engine(db_url))()
    try:
        yield session
        session.commit()
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()
