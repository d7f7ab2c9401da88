"""Inharmonious region localization with an adaptive color-mapping stage."""
from .config import TrainConfig
from .dataset import DataError
from .diffcore import NumericalError, ParamStore, grad_check
from .estimator import DiscrepancyStats, InharmonyLocalizer
from .losses import LossWeights
from .metrics import MetricsReport, average_precision, f1_iou

__all__ = [
    "DataError",
    "DiscrepancyStats",
    "InharmonyLocalizer",
    "LossWeights",
    "MetricsReport",
    "NumericalError",
    "ParamStore",
    "TrainConfig",
    "average_precision",
    "f1_iou",
    "grad_check",
]
