# Результат одного эпизода бенчмарка
from datetime import datetime

from sqlalchemy import Column, DateTime, Integer, String, Text, UniqueConstraint

from app.core.database import Base


class EpisodeResult(Base):
    __tablename__ = "episode_results"
    __table_args__ = (UniqueConstraint("level", "method", "seed", "config_hash", name="uq_episode_cell"),)

    id = Column(Integer, primary_key=True)
    level = Column(Integer, nullable=False, index=True)
    method = Column(String, nullable=False, index=True)
    seed = Column(Integer, nullable=False)
    config_hash = Column(String, nullable=False)
    status = Column(String, default="ok")  # ok | failed
    metrics_json = Column(Text, nullable=True)  # EpisodeMetrics в JSON
    trace_path = Column(String, nullable=True)
    error = Column(Text, nullable=True)
    created_at = Column(DateTime, default=datetime.utcnow)
