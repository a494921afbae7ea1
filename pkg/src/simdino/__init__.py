"""Simplified self-distillation (SimDINO-style) at desk scale in numpy."""

from .coding_rate import CodingRateConfig, coding_rate, coding_rate_grad, coding_rate_value
from .config import RunConfig
from .trainer import run_training, train_step

__all__ = [
    "CodingRateConfig", "RunConfig", "coding_rate", "coding_rate_grad", "coding_rate_value",
    "run_training", "train_step",
]
__version__ = "0.1.0"
