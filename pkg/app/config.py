# Настройки проекта (горизонт, окна конфликтов, бюджеты поиска и пр.)
# app/config.py

from pydantic_settings import BaseSettings
from pydantic import Field


class Settings(BaseSettings):
    # Параллелизм прогонов (RAILFLOW_THREADS)
    THREADS: int = Field(default=1, ge=1)

    # Горизонт эпизода: T_max = ceil(beta * (w + h + n_trains / n_cities))
    HORIZON_BETA: float = Field(default=8.0, gt=0)

    # Окна эвристик диспетчера и маршрутизатора (в шагах)
    CONFLICT_WINDOW: int = Field(default=10, ge=0)
    STOP_WINDOW: int = Field(default=5, ge=0)
    TOP_K: int = Field(default=2, ge=1)

    # Генерация расписаний
    SCHEDULE_SLACK: float = Field(default=0.25, ge=0)
    DEPARTURE_SPREAD: float = Field(default=0.25, ge=0, le=1)

    # Нормировка глобальных признаков диспетчера
    MAX_TRAINS_NORM: int = Field(default=100, ge=1)
    MAX_HORIZON_NORM: int = Field(default=2000, ge=1)

    # MCTS
    MCTS_BUDGET: int = Field(default=100, ge=1)
    MCTS_DEPTH: int = Field(default=40, ge=1)
    MCTS_EXPLORATION: float = Field(default=1.4, ge=0)

    # Приоритетное планирование: предел раскрытий на один поезд
    PP_MAX_EXPANSIONS: int = Field(default=200_000, ge=1)

    # Проверка эксклюзивности занятости на каждом шаге
    DEBUG_CHECKS: bool = Field(default=False)

    LOG_LEVEL: str = Field(default="INFO")
    DATABASE_URL: str | None = None  # по умолчанию results.sqlite в каталоге бенчмарка

    class Config:
        env_prefix = "RAILFLOW_"
        env_file = ".env"
        env_file_encoding = "utf-8"
        extra = "ignore"  # Игнорировать лишние переменные в .env


settings = Settings()
