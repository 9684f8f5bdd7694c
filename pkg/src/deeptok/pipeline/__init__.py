"""Training orchestration, evaluation, ablations and the command line."""

from .config import TrainConfig, resolve
from .schedule import cosine_lr

__all__ = ["TrainConfig", "resolve", "cosine_lr"]
