"""Histogram gradient-boosted regression trees."""
from .binning import BinMapper, build_histograms, fit_bins
from .boosting import (
    RegistryError,
    TrainConfig,
    TrainState,
    TreeEnsemble,
    fit,
    predict,
    validation_split,
)
from .goss import goss_sample
from .tree import ModelFormatError, Tree, grow_tree

__all__ = [
    "BinMapper",
    "ModelFormatError",
    "RegistryError",
    "TrainConfig",
    "TrainState",
    "Tree",
    "TreeEnsemble",
    "build_histograms",
    "fit",
    "fit_bins",
    "goss_sample",
    "grow_tree",
    "predict",
    "validation_split",
]
