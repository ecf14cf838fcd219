"""Audio/visual fusion transformer for emotional reaction intensity estimation."""

from .model import ModelConfig, PredictionSet, ensemble_average, forward, init_params
from .training import TrainConfig, train

__all__ = ["ModelConfig", "PredictionSet", "TrainConfig", "ensemble_average", "forward", "init_params", "train"]
__version__ = "0.1.0"
