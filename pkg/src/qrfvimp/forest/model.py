"""
Honest subsampled quantile forests.

Each tree draws a subsample of size ``s`` without replacement, splits it
into a structure half and an estimation half of size ``s / 2``, grows its
partition on the structure half with the gradient criterion, and keeps the
estimation-half members of every leaf. The forest kernel at ``x`` is the
average over trees of the uniform weights on the estimation members of the
leaf containing ``x``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from ..pinball import check_tau
from . import _kernels
from .data import Dataset, Fingerprint

logger = logging.getLogger(__name__)

__all__ = [
    "ForestConfig",
    "TreeStructure",
    "ForestModel",
    "WeightVector",
    "subsample_indices",
    "honest_split",
    "pseudo_outcomes",
    "split_gain",
    "tree_rng",
    "grow_tree",
    "tree_kernel",
    "fit_forest",
    "forest_weights",
    "forest_weight_matrix",
]


def _even_floor(k: int) -> int:
    return int(k) - int(k) % 2


@dataclass(frozen=True)
class ForestConfig:
    """
    Forest hyper-parameters.

    Exactly one of ``subsample_size`` and ``beta`` may be given; with
    neither, ``beta`` defaults to 0.7. ``mtry=None`` resolves to
    ``ceil(sqrt(p))``.
    """

    num_trees: int = 1000
    subsample_size: int | None = None
    beta: float | None = None
    alpha: float = 0.05
    min_leaf_est: int = 5
    mtry: int | None = None
    seed: int = 0
    tau: float = 0.5

    def __post_init__(self):
        check_tau(self.tau)
        if int(self.num_trees) < 1:
            raise ValueError("num_trees must be positive")
        if self.subsample_size is not None and self.beta is not None:
            raise ValueError("give either subsample_size or beta, not both")
        if self.subsample_size is not None and int(self.subsample_size) < 2:
            raise ValueError("subsample_size must be at least 2")
        if self.beta is not None and not (0.0 < float(self.beta) < 1.0):
            raise ValueError("beta must lie in (0, 1)")
        if not (0.0 < float(self.alpha) < 0.5):
            raise ValueError("alpha must lie in (0, 0.5)")
        if int(self.min_leaf_est) < 1:
            raise ValueError("min_leaf_est must be positive")
        if self.mtry is not None and int(self.mtry) < 1:
            raise ValueError("mtry must be positive")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must be a 64-bit unsigned integer")

    def resolve_subsample(self, n: int) -> int:
        """Even subsample size for ``n`` rows."""
        if self.subsample_size is not None:
            s = _even_floor(int(self.subsample_size))
        else:
            beta = 0.7 if self.beta is None else float(self.beta)
            s = max(4 * int(self.min_leaf_est), _even_floor(round(n ** beta)))
        if s > n:
            raise ValueError(f"subsample size {s} exceeds the {n} available rows")
        if s < 2:
            raise ValueError("subsample size must be at least 2")
        return s

    def resolve_beta(self, n: int) -> float:
        """Subsampling exponent: the configured beta, else log s / log n."""
        if self.beta is not None:
            return float(self.beta)
        return math.log(self.resolve_subsample(n)) / math.log(n)

    def resolve_mtry(self, p: int) -> int:
        m = math.ceil(math.sqrt(p)) if self.mtry is None else int(self.mtry)
        if m > p:
            raise ValueError(f"mtry={m} exceeds the {p} available features")
        return m

    def to_dict(self):
        return {
            "num_trees": int(self.num_trees),
            "subsample_size": None if self.subsample_size is None else int(self.subsample_size),
            "beta": None if self.beta is None else float(self.beta),
            "alpha": float(self.alpha),
            "min_leaf_est": int(self.min_leaf_est),
            "mtry": None if self.mtry is None else int(self.mtry),
            "seed": int(self.seed),
            "tau": float(self.tau),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class WeightVector:
    """Sparse nonnegative kernel weights over training rows."""

    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if len(self.indices) != len(self.weights):
            raise ValueError("indices and weights differ in length")

    def __len__(self):
        return len(self.indices)

    def total(self) -> float:
        return float(np.sum(self.weights))

    def to_dense(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        np.add.at(out, self.indices, self.weights)
        return out

    def as_dict(self) -> dict:
        return {int(i): float(w) for i, w in zip(self.indices, self.weights)}


@dataclass(frozen=True, eq=False)
class TreeStructure:
    """
    One fitted tree. ``feature[k] == -1`` marks a leaf; ``leaf_id[k]`` then
    indexes ``leaf_members``. Feature indices refer to full-data columns.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_train: np.ndarray
    n_est: np.ndarray
    leaf_id: np.ndarray
    leaf_members: tuple

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_members)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] == _kernels.LEAF

    def apply(self, x) -> int:
        """Leaf id of the cell containing ``x``."""
        x = np.asarray(x, dtype=float)
        node = 0
        while self.feature[node] != _kernels.LEAF:
            if x[self.feature[node]] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return int(self.leaf_id[node])

    def same_structure(self, other: "TreeStructure") -> bool:
        return (np.array_equal(self.feature, other.feature)
                and np.array_equal(self.threshold, other.threshold)
                and np.array_equal(self.left, other.left)
                and np.array_equal(self.right, other.right)
                and np.array_equal(self.n_train, other.n_train))

    def __eq__(self, other):
        if not isinstance(other, TreeStructure):
            return NotImplemented
        return (self.same_structure(other)
                and np.array_equal(self.n_est, other.n_est)
                and np.array_equal(self.leaf_id, other.leaf_id)
                and len(self.leaf_members) == len(other.leaf_members)
                and all(np.array_equal(a, b) for a, b in
                        zip(self.leaf_members, other.leaf_members)))


def subsample_indices(n: int, s: int, rng: np.random.Generator) -> np.ndarray:
    """``s`` distinct row indices drawn uniformly without replacement."""
    if s > n:
        raise ValueError(f"cannot draw {s} rows without replacement from {n}")
    if s < 0:
        raise ValueError("subsample size must be nonnegative")
    return rng.choice(n, size=s, replace=False)


def honest_split(indices, rng: np.random.Generator):
    """Random equal split of ``indices`` into (structure half, estimation half)."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) % 2:
        raise ValueError("honest split needs an even number of indices")
    perm = rng.permutation(indices)
    h = len(indices) // 2
    return perm[:h], perm[h:]


def pseudo_outcomes(y, tau) -> np.ndarray:
    """Pinball scores of the node responses at the node's own empirical quantile."""
    tau = check_tau(tau)
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("empty node")
    return _kernels.pseudo_outcomes(y, tau)


def split_gain(pseudo, left_mask) -> float:
    """``n_L n_R / n^2 * (mean_L - mean_R)^2``."""
    pseudo = np.asarray(pseudo, dtype=float)
    left_mask = np.asarray(left_mask, dtype=bool)
    n_l = int(left_mask.sum())
    n_r = len(pseudo) - n_l
    if n_l == 0 or n_r == 0:
        raise ValueError("both children must be nonempty")
    n = len(pseudo)
    diff = pseudo[left_mask].mean() - pseudo[~left_mask].mean()
    return n_l * n_r / n**2 * diff**2


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    """Independent random stream for one tree."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tree_index)]))


def _draw_tree_randomness(n, s, seed, n_trees):
    h = s // 2
    train = np.empty((n_trees, h), dtype=np.int64)
    est = np.empty((n_trees, h), dtype=np.int64)
    seeds = np.empty(n_trees, dtype=np.int64)
    for b in range(n_trees):
        rng = tree_rng(seed, b)
        tr, es = honest_split(subsample_indices(n, s, rng), rng)
        train[b] = tr
        est[b] = es
        seeds[b] = rng.integers(0, 2**32 - 1)
    return train, est, seeds


def grow_tree(data: Dataset, train_half, est_half, config: ForestConfig,
              rng: np.random.Generator, columns=None) -> TreeStructure:
    """
    Grow a single honest tree on the structure half of ``data``.

    ``columns`` restricts the split candidates (default: all features).
    """
    train_half = np.asarray(train_half, dtype=np.int64)
    est_half = np.asarray(est_half, dtype=np.int64)
    if np.intersect1d(train_half, est_half).size:
        raise ValueError("structure and estimation halves overlap")
    m = int(config.min_leaf_est)
    if len(est_half) < m or len(train_half) < 1:
        raise ValueError("halves too small for min_leaf_est")
    cols = np.arange(data.p, dtype=np.int64) if columns is None else np.asarray(columns, dtype=np.int64)
    mtry = config.resolve_mtry(len(cols))
    out = _kernels.grow_tree(data.x, data.y, train_half, est_half, cols,
                             float(config.tau), float(config.alpha), m, mtry,
                             int(rng.integers(0, 2**32 - 1)))
    return _tree_from_arrays(*out)


def _tree_from_arrays(feature, threshold, left, right, ntrain, nest, leaf_of,
                      members, ptr, leaf_offset=0, member_offset=0):
    leaves = tuple(members[ptr[j] - member_offset:ptr[j + 1] - member_offset]
                   for j in range(len(ptr) - 1))
    leaf_id = np.where(leaf_of >= 0, leaf_of - leaf_offset, -1)
    return TreeStructure(feature, threshold, left, right, ntrain, nest,
                         leaf_id, leaves)


def tree_kernel(tree: TreeStructure, x) -> WeightVector:
    """Uniform weights on the estimation members of the leaf containing ``x``."""
    members = tree.leaf_members[tree.apply(x)]
    if len(members) == 0:
        raise ValueError("leaf has no estimation members")
    return WeightVector(np.asarray(members, dtype=np.int64),
                        np.full(len(members), 1.0 / len(members)))


@dataclass(frozen=True, eq=False)
class ForestModel:
    """
    A fitted forest stored as flat node arrays (see ``_kernels``).

    ``columns`` lists the full-data features the trees may split on; a
    model fitted without some features still accepts full-width queries.
    ``responses`` are the training responses needed for prediction.
    """

    config: ForestConfig
    n_rows: int
    n_features: int
    subsample_size: int
    mtry: int
    columns: np.ndarray
    fingerprint: Fingerprint
    responses: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_train: np.ndarray
    n_est: np.ndarray
    leaf_of_node: np.ndarray
    leaf_members: np.ndarray
    leaf_ptr: np.ndarray
    tree_node_ptr: np.ndarray
    feature_names: tuple = ()
    _halves: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("responses", "feature", "threshold", "left", "right",
                     "n_train", "n_est", "leaf_of_node", "leaf_members",
                     "leaf_ptr", "tree_node_ptr", "columns"):
            getattr(self, name).flags.writeable = False

    @property
    def num_trees(self) -> int:
        return len(self.tree_node_ptr) - 1

    @property
    def tau(self) -> float:
        return float(self.config.tau)

    @property
    def beta(self) -> float:
        if self.config.beta is not None:
            return float(self.config.beta)
        return math.log(self.subsample_size) / math.log(self.n_rows)

    def tree(self, b: int) -> TreeStructure:
        lo, hi = self.tree_node_ptr[b], self.tree_node_ptr[b + 1]
        leaf_of = self.leaf_of_node[lo:hi]
        leaf_ids = leaf_of[leaf_of >= 0]
        first, last = int(leaf_ids.min()), int(leaf_ids.max())
        ptr = self.leaf_ptr[first:last + 2]
        return _tree_from_arrays(
            self.feature[lo:hi], self.threshold[lo:hi], self.left[lo:hi],
            self.right[lo:hi], self.n_train[lo:hi], self.n_est[lo:hi],
            leaf_of, self.leaf_members[ptr[0]:ptr[-1]], ptr,
            leaf_offset=first, member_offset=int(ptr[0]))

    def trees(self):
        for b in range(self.num_trees):
            yield self.tree(b)

    def halves(self):
        """Structure and estimation halves per tree, as (B, s/2) arrays."""
        if self._halves is None:
            tr, es, _ = _draw_tree_randomness(self.n_rows, self.subsample_size,
                                              self.config.seed, self.num_trees)
            object.__setattr__(self, "_halves", (tr, es))
        return self._halves

    def check_query(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.n_features:
            raise ValueError(f"query has {x.shape[1]} features, model expects "
                             f"{self.n_features}")
        if not np.all(np.isfinite(x)):
            raise ValueError("query contains non-finite values")
        return np.ascontiguousarray(x), squeeze

    def check_data(self, data: Dataset | None) -> np.ndarray:
        """Training responses, verifying ``data`` matches the fitted rows."""
        if data is None:
            return self.responses
        if data.fingerprint() != self.fingerprint:
            raise ValueError("dataset does not match the data the model was fitted on")
        return data.y

    def weights_csr(self, X):
        X, _ = self.check_query(X)
        return _kernels.forest_weights_batch(
            self.feature, self.threshold, self.left, self.right,
            self.leaf_of_node, self.leaf_members, self.leaf_ptr,
            self.tree_node_ptr, self.n_rows, X)

    def same_structure(self, other: "ForestModel") -> bool:
        return (self.num_trees == other.num_trees
                and np.array_equal(self.tree_node_ptr, other.tree_node_ptr)
                and np.array_equal(self.feature, other.feature)
                and np.array_equal(self.threshold, other.threshold)
                and np.array_equal(self.left, other.left)
                and np.array_equal(self.right, other.right)
                and np.array_equal(self.n_train, other.n_train))

    def identical_to(self, other: "ForestModel") -> bool:
        return (self.same_structure(other)
                and np.array_equal(self.n_est, other.n_est)
                and np.array_equal(self.leaf_of_node, other.leaf_of_node)
                and np.array_equal(self.leaf_members, other.leaf_members)
                and np.array_equal(self.leaf_ptr, other.leaf_ptr)
                and np.array_equal(self.columns, other.columns)
                and self.config == other.config
                and self.fingerprint == other.fingerprint)


def fit_forest(data: Dataset, config: ForestConfig, columns=None) -> ForestModel:
    """
    Fit ``config.num_trees`` honest trees.

    Tree ``b`` draws its subsample, honest split and feature candidates from
    a stream seeded by ``(config.seed, b)``, so the fit does not depend on
    execution order.

    Parameters
    ----------
    data : Dataset
    config : ForestConfig
    columns : sequence of int, optional
        Features eligible for splitting; defaults to all.
    """
    n, p = data.n, data.p
    cols = np.arange(p, dtype=np.int64) if columns is None else np.unique(np.asarray(columns, dtype=np.int64))
    if cols.size == 0:
        raise ValueError("no covariates left to split on")
    if cols.min() < 0 or cols.max() >= p:
        raise ValueError("column index out of range")
    s = config.resolve_subsample(n)
    mtry = config.resolve_mtry(len(cols))
    h = s // 2
    if h < config.min_leaf_est:
        raise ValueError(f"estimation half of size {h} is smaller than "
                         f"min_leaf_est={config.min_leaf_est}")
    B = int(config.num_trees)
    if B < 2 * n / s:
        warnings.warn(f"num_trees={B} is small relative to n/s={n / s:.1f}; "
                      "forest weights carry Monte Carlo noise", RuntimeWarning,
                      stacklevel=2)
    train, est, seeds = _draw_tree_randomness(n, s, config.seed, B)
    arrays = _kernels.grow_forest(data.x, data.y, train, est, cols,
                                  float(config.tau), float(config.alpha),
                                  int(config.min_leaf_est), mtry, seeds)
    logger.debug("fitted %d trees (n=%d, s=%d, %d nodes)", B, n, s, len(arrays[0]))
    return ForestModel(config, n, p, s, mtry, cols, data.fingerprint(),
                       data.y.copy(), *arrays, feature_names=tuple(data.feature_names),
                       _halves=(train, est))


def forest_weights(model: ForestModel, x) -> WeightVector:
    """Forest kernel ``(1/B) sum_b K_b(x, X_i)`` at a single query point."""
    X, squeeze = model.check_query(x)
    if X.shape[0] != 1:
        raise ValueError("forest_weights expects a single query point")
    indptr, indices, weights = model.weights_csr(X)
    return WeightVector(indices, weights)


def forest_weight_matrix(model: ForestModel, X) -> sparse.csr_matrix:
    """Forest kernel rows for many query points as a (q, n) CSR matrix."""
    indptr, indices, weights = model.weights_csr(X)
    return sparse.csr_matrix((weights, indices, indptr),
                             shape=(len(indptr) - 1, model.n_rows))
