from .data import Dataset, Fingerprint
from .model import (
    ForestConfig,
    ForestModel,
    TreeStructure,
    WeightVector,
    fit_forest,
    forest_weight_matrix,
    forest_weights,
    grow_tree,
    honest_split,
    pseudo_outcomes,
    split_gain,
    subsample_indices,
    tree_kernel,
    tree_rng,
)
from .persist import CorruptModelError, load_model, save_model

__all__ = [
    "Dataset",
    "Fingerprint",
    "ForestConfig",
    "ForestModel",
    "TreeStructure",
    "WeightVector",
    "fit_forest",
    "forest_weight_matrix",
    "forest_weights",
    "grow_tree",
    "honest_split",
    "pseudo_outcomes",
    "split_gain",
    "subsample_indices",
    "tree_kernel",
    "tree_rng",
    "CorruptModelError",
    "load_model",
    "save_model",
]
