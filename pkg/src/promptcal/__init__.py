"""Calibration-aware prompt tuning on a synthetic CLIP-like model."""

__version__ = "0.1.0"

from .losses import LossWeights, cross_entropy, margin_loss, margins, moment_loss, total_loss
from .metrics import BinningConfig, TemperatureScaler, calibration_report, fit_temperature, report_from_logits
from .trainer import PromptTuningClassifier, TrainConfig, evaluate, train

__all__ = [
    "__version__",
    "BinningConfig",
    "LossWeights",
    "PromptTuningClassifier",
    "TemperatureScaler",
    "TrainConfig",
    "calibration_report",
    "cross_entropy",
    "evaluate",
    "fit_temperature",
    "margin_loss",
    "margins",
    "moment_loss",
    "report_from_logits",
    "total_loss",
    "train",
]
