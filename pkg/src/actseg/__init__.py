"""Asymmetric co-training for semi-supervised domain-adaptive segmentation."""

from .act import ActConfig, train, train_single
from .datagen import DataConfig, DatasetSplits, make_splits
from .estimators import ACTSegmenter, SelfTrainingSegmenter
from .metrics import WHOLE, RunReport, aggregate, dsc, evaluate, hausdorff

__version__ = "0.1.0"

__all__ = [
    "ActConfig",
    "train",
    "train_single",
    "DataConfig",
    "DatasetSplits",
    "make_splits",
    "ACTSegmenter",
    "SelfTrainingSegmenter",
    "WHOLE",
    "RunReport",
    "aggregate",
    "dsc",
    "evaluate",
    "hausdorff",
]
