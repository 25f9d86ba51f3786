from .episode import EpisodeResult

__all__ = ["EpisodeResult"]
