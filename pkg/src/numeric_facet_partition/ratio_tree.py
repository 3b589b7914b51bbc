#!/usr/bin/env python3
"""
Ratio Regression Tree

Binary tree over query features whose nodes each hold a ratio vector fitted on
the node's training impressions. Growth follows CART with two criteria
(minimum surrogate C_n, or squared error of the clicked quantile z);
minimal cost-complexity pruning picks the subtree by cross-validated surrogate.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, PositiveInt

from numeric_facet_partition.errors import DimensionMismatchError, EmptyLogError
from numeric_facet_partition.log_model import Impression, SearchLog, valued_entities
from numeric_facet_partition.metric import Partitioner, SeparatorSet
from numeric_facet_partition.partition_core import RatioVector, ratio_to_separators
from numeric_facet_partition.ratio_opt import (
    EmpiricalCdf,
    OptimizerSettings,
    RatioFit,
    candidate_ratios,
    compute_z,
    optimize_ratio,
    surrogate_per_query,
)

logger = logging.getLogger(__name__)

QUARTILES = (0.25, 0.5, 0.75)
PRUNE_TOLERANCE = 1e-12


class FeatureOptions(BaseModel):
    """Which query features the tree sees."""

    use_provided: bool = Field(True, description="Include the feature vector carried by each impression")
    quartiles: bool = Field(False, description="Append the 25/50/75% order statistics of the facet values")


class TreeSettings(BaseModel):
    """Growth and pruning settings."""

    criterion: Literal["min_cn", "mse"] = Field("min_cn", description="Split criterion")
    min_leaf: PositiveInt = Field(50, description="Minimum training impressions per leaf")
    max_depth: int = Field(4, ge=0, description="Maximum depth (0 = single leaf)")
    max_split_candidates: PositiveInt = Field(16, description="Thresholds tried per feature")
    min_improvement: float = Field(1e-9, ge=0, description="Required decrease of the split score")
    cv_folds: int = Field(5, ge=2, description="Folds for cost-complexity pruning")
    se_rule: float = Field(0.5, ge=0, description="Standard-error multiple of the selection rule")
    split_restarts: PositiveInt = Field(3, description="Optimiser restarts when scoring min_cn splits")


def extract_features(impression: Impression, options: Optional[FeatureOptions] = None) -> np.ndarray:
    """Provided features (if enabled and present) followed by the three quartile values (if enabled)."""
    options = options or FeatureOptions()
    parts: List[float] = []
    if options.use_provided and impression.features is not None:
        parts.extend(impression.features)
    if options.quartiles:
        values = sorted(e.value for e in valued_entities(impression))
        n = len(values)
        parts.extend(values[min(math.ceil(q * n), n - 1)] for q in QUARTILES)
    return np.asarray(parts, dtype=float)


@dataclass
class TreeNode:
    """
    One node. Every node carries the ratio vector fitted on its own training
    impressions, so any pruned subtree is usable as is.
    """
    node_id: int
    ratios: RatioVector
    cn: float
    n_samples: int
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def walk(self):
        yield self
        if not self.is_leaf:
            yield from self.left.walk()
            yield from self.right.walk()

    def to_dict(self) -> dict:
        data = {
            "node_id": self.node_id,
            "ratios": list(self.ratios.ratios),
            "cn": self.cn,
            "n_samples": self.n_samples,
        }
        if not self.is_leaf:
            data.update(feature=self.feature, threshold=self.threshold,
                        left=self.left.to_dict(), right=self.right.to_dict())
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TreeNode":
        node = cls(
            node_id=int(data["node_id"]),
            ratios=RatioVector(tuple(data["ratios"])),
            cn=float(data["cn"]),
            n_samples=int(data["n_samples"]),
        )
        if "feature" in data:
            node.feature = int(data["feature"])
            node.threshold = float(data["threshold"])
            node.left = cls.from_dict(data["left"])
            node.right = cls.from_dict(data["right"])
        return node


@dataclass
class RatioTree:
    """Fitted tree with the settings it was grown with."""
    root: TreeNode
    k: int
    n_features: int
    n_train: int
    settings: TreeSettings = field(default_factory=TreeSettings)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    features: FeatureOptions = field(default_factory=FeatureOptions)

    @property
    def criterion(self) -> str:
        return self.settings.criterion

    def leaves(self) -> List[TreeNode]:
        return [node for node in self.root.walk() if node.is_leaf]

    @property
    def n_leaves(self) -> int:
        return len(self.leaves())

    def route(self, x: Sequence[float]) -> TreeNode:
        node = self.root
        while not node.is_leaf:
            node = node.right if x[node.feature] > node.threshold else node.left
        return node

    def training_cost(self) -> float:
        """Weighted training surrogate: sum over leaves of (n_t / N) * C_n(t)."""
        return sum(leaf.n_samples / self.n_train * leaf.cn for leaf in self.leaves())

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_features": self.n_features,
            "n_train": self.n_train,
            "settings": self.settings.model_dump(),
            "optimizer": self.optimizer.model_dump(),
            "features": self.features.model_dump(),
            "root": self.root.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RatioTree":
        return cls(
            root=TreeNode.from_dict(data["root"]),
            k=int(data["k"]),
            n_features=int(data["n_features"]),
            n_train=int(data["n_train"]),
            settings=TreeSettings.model_validate(data["settings"]),
            optimizer=OptimizerSettings.model_validate(data["optimizer"]),
            features=FeatureOptions.model_validate(data["features"]),
        )


def save_tree(tree: RatioTree, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(tree.to_dict(), f, indent=2)
        f.write("\n")


def load_tree(path: Union[str, Path]) -> RatioTree:
    with open(path, "r", encoding="utf-8") as f:
        return RatioTree.from_dict(json.load(f))


def _feature_matrix(log: SearchLog, options: FeatureOptions) -> np.ndarray:
    rows = [extract_features(imp, options) for imp in log.impressions]
    dims = {len(r) for r in rows}
    if len(dims) > 1:
        raise DimensionMismatchError(f"impressions carry feature vectors of different lengths: {sorted(dims)}")
    return np.vstack(rows) if rows else np.empty((0, 0))


class _TreeGrower:
    """Recursive CART growth over precomputed features, z values and result sizes."""

    def __init__(self, X: np.ndarray, z: np.ndarray, sizes: np.ndarray, k: int,
                 settings: TreeSettings, optimizer: OptimizerSettings):
        self.X = X
        self.z = z
        self.sizes = sizes
        self.k = k
        self.settings = settings
        self.optimizer = optimizer
        self.split_optimizer = optimizer.model_copy(
            update={"restarts": min(settings.split_restarts, optimizer.restarts)})
        self._next_id = 0

    def _cdf(self, idx: np.ndarray) -> EmpiricalCdf:
        return EmpiricalCdf.from_z(self.z[idx], candidate_ratios(self.sizes[idx]))

    def _fit(self, idx: np.ndarray, optimizer: OptimizerSettings) -> RatioFit:
        return optimize_ratio(self._cdf(idx), self.k, optimizer)

    def _thresholds(self, column: np.ndarray) -> np.ndarray:
        distinct = np.unique(column)
        if distinct.size < 2:
            return np.empty(0)
        mids = (distinct[:-1] + distinct[1:]) / 2.0
        cap = self.settings.max_split_candidates
        if mids.size > cap:
            mids = mids[np.unique(np.linspace(0, mids.size - 1, cap).round().astype(int))]
        return mids

    def _sse(self, idx: np.ndarray) -> float:
        values = self.z[idx]
        return float(((values - values.mean()) ** 2).sum())

    def _score(self, left: np.ndarray, right: np.ndarray) -> float:
        if self.settings.criterion == "mse":
            return self._sse(left) + self._sse(right)
        n = len(left) + len(right)
        return (len(left) / n * self._fit(left, self.split_optimizer).value
                + len(right) / n * self._fit(right, self.split_optimizer).value)

    def _best_split(self, idx: np.ndarray, parent_score: float) -> Optional[Tuple[int, float]]:
        best_score, best = parent_score - self.settings.min_improvement, None
        for j in range(self.X.shape[1]):
            column = self.X[idx, j]
            for theta in self._thresholds(column):
                go_right = column > theta
                n_right = int(go_right.sum())
                if min(n_right, len(idx) - n_right) < self.settings.min_leaf:
                    continue
                score = self._score(idx[~go_right], idx[go_right])
                if score < best_score:
                    best_score, best = score, (j, float(theta))
        return best

    def grow(self, idx: np.ndarray, depth: int = 0) -> TreeNode:
        fit = self._fit(idx, self.optimizer)
        node = TreeNode(node_id=self._next_id, ratios=fit.ratios, cn=fit.value, n_samples=len(idx))
        self._next_id += 1

        if (depth >= self.settings.max_depth
                or len(idx) < 2 * self.settings.min_leaf
                or self.X.shape[1] == 0
                or np.ptp(self.z[idx]) == 0.0):
            return node

        parent_score = self._sse(idx) if self.settings.criterion == "mse" else fit.value
        split = self._best_split(idx, parent_score)
        if split is None:
            return node

        node.feature, node.threshold = split
        go_right = self.X[idx, node.feature] > node.threshold
        logger.debug("Node %d: split on x[%d] > %.6g (%d | %d)",
                     node.node_id, node.feature, node.threshold, int((~go_right).sum()), int(go_right.sum()))
        node.left = self.grow(idx[~go_right], depth + 1)
        node.right = self.grow(idx[go_right], depth + 1)
        return node


def fit_tree(train: SearchLog, k: int, settings: Optional[TreeSettings] = None,
             optimizer: Optional[OptimizerSettings] = None,
             features: Optional[FeatureOptions] = None) -> RatioTree:
    """
    Grow a ratio tree on the training log.

    A min_cn split is accepted when the sample-weighted children's minimal C_n
    undercuts the parent's C_n; an mse split when the children's summed squared
    error of z undercuts the parent's.
    """
    settings = settings or TreeSettings()
    optimizer = optimizer or OptimizerSettings()
    features = features or FeatureOptions()
    if len(train) == 0:
        raise EmptyLogError("cannot fit a tree on an empty training log")

    X = _feature_matrix(train, features)
    if X.shape[1] == 0:
        logger.warning("No query features available; the tree will be a single leaf")
    z = np.array([compute_z(imp) for imp in train.impressions])
    sizes = np.array([len(valued_entities(imp)) for imp in train.impressions])

    grower = _TreeGrower(X, z, sizes, k, settings, optimizer)
    root = grower.grow(np.arange(len(train)))
    tree = RatioTree(root=root, k=k, n_features=X.shape[1], n_train=len(train),
                     settings=settings, optimizer=optimizer, features=features)
    logger.info("Grew %s tree: %d leaves, training C_n %.6f", settings.criterion, tree.n_leaves, tree.training_cost())
    return tree


def predict_ratio(tree: RatioTree, features: Sequence[float]) -> RatioVector:
    """Route a feature vector (x_j > threshold goes right) to its leaf's ratio vector."""
    x = np.asarray(features, dtype=float)
    if x.shape != (tree.n_features,):
        raise DimensionMismatchError(f"expected {tree.n_features} features, got {x.size}")
    return tree.route(x).ratios


def tree_partitioner(tree: RatioTree) -> Partitioner:
    """Per-impression partitioner: features, then predicted ratios, then separators."""
    def partition(impression: Impression) -> SeparatorSet:
        ratios = predict_ratio(tree, extract_features(impression, tree.features))
        return ratio_to_separators(valued_entities(impression), ratios)
    return partition


# -------- cost-complexity pruning --------

def _subtree_leaves(node: TreeNode, collapsed: FrozenSet[int]) -> List[TreeNode]:
    if node.is_leaf or node.node_id in collapsed:
        return [node]
    return _subtree_leaves(node.left, collapsed) + _subtree_leaves(node.right, collapsed)


def _standing_internal(node: TreeNode, collapsed: FrozenSet[int]) -> List[TreeNode]:
    if node.is_leaf or node.node_id in collapsed:
        return []
    return [node] + _standing_internal(node.left, collapsed) + _standing_internal(node.right, collapsed)


def _weakest_links(tree: RatioTree, collapsed: FrozenSet[int]) -> Dict[int, float]:
    """g(t) = (R(t) - R(T_t)) / (|leaves(T_t)| - 1) for every internal node still standing."""
    def risk(node: TreeNode) -> float:
        return node.n_samples / tree.n_train * node.cn

    links = {}
    for node in _standing_internal(tree.root, collapsed):
        leaves = _subtree_leaves(node, collapsed)
        links[node.node_id] = (risk(node) - sum(risk(leaf) for leaf in leaves)) / (len(leaves) - 1)
    return links


def cost_complexity_path(tree: RatioTree) -> List[Tuple[float, FrozenSet[int]]]:
    """
    Weakest-link sequence of nested subtrees, from the full tree down to the root.

    Each entry is (alpha, ids of collapsed internal nodes).
    """
    collapsed: FrozenSet[int] = frozenset()
    links = _weakest_links(tree, collapsed)
    alpha = 0.0
    path = []
    while True:
        collapsed = collapsed | {nid for nid, g in links.items() if g <= alpha + PRUNE_TOLERANCE}
        path.append((alpha, collapsed))
        links = _weakest_links(tree, collapsed)
        if not links:
            return path
        alpha = max(alpha, min(links.values()))


def _materialize(node: TreeNode, collapsed: FrozenSet[int]) -> TreeNode:
    copy = TreeNode(node_id=node.node_id, ratios=node.ratios, cn=node.cn, n_samples=node.n_samples)
    if not node.is_leaf and node.node_id not in collapsed:
        copy.feature, copy.threshold = node.feature, node.threshold
        copy.left = _materialize(node.left, collapsed)
        copy.right = _materialize(node.right, collapsed)
    return copy


def _subtree(tree: RatioTree, collapsed: FrozenSet[int]) -> RatioTree:
    return RatioTree(root=_materialize(tree.root, collapsed), k=tree.k, n_features=tree.n_features,
                     n_train=tree.n_train, settings=tree.settings, optimizer=tree.optimizer,
                     features=tree.features)


def _at_alpha(path: List[Tuple[float, FrozenSet[int]]], beta: float) -> FrozenSet[int]:
    chosen = path[0][1]
    for alpha, collapsed in path:
        if alpha <= beta + PRUNE_TOLERANCE:
            chosen = collapsed
    return chosen


def prune_tree(tree: RatioTree, train: SearchLog) -> RatioTree:
    """
    Minimal cost-complexity pruning.

    Folds are contiguous in timestamp order. Each fold's held-out score is the
    mean per-query surrogate of the routed leaf's ratios; the smallest subtree
    whose score is within se_rule standard errors of the best is returned.
    """
    if tree.root.is_leaf:
        return tree

    path = cost_complexity_path(tree)
    alphas = [alpha for alpha, _ in path]
    betas = [math.sqrt(a * b) for a, b in zip(alphas, alphas[1:])] + [alphas[-1]]

    order = sorted(range(len(train)), key=lambda i: train.impressions[i].timestamp)
    folds = np.array_split(np.asarray(order), tree.settings.cv_folds)
    held_out: List[List[float]] = [[] for _ in betas]
    for f, test_idx in enumerate(folds):
        if len(test_idx) == 0:
            continue
        train_idx = np.concatenate([fold for g, fold in enumerate(folds) if g != f])
        fold_tree = fit_tree(train.subset(train_idx), tree.k, tree.settings, tree.optimizer, tree.features)
        fold_path = cost_complexity_path(fold_tree)
        test_log = train.subset(test_idx)
        X = _feature_matrix(test_log, tree.features)
        z = np.array([compute_z(imp) for imp in test_log.impressions])
        for b, beta in enumerate(betas):
            subtree = _subtree(fold_tree, _at_alpha(fold_path, beta))
            for x, zi in zip(X, z):
                held_out[b].append(float(surrogate_per_query([zi], subtree.route(x).ratios)[0]))
        logger.info("Pruning fold %d/%d: %d held-out impressions", f + 1, len(folds), len(test_idx))

    scores = np.array([np.mean(v) for v in held_out])
    errors = np.array([np.std(v, ddof=1) / math.sqrt(len(v)) if len(v) > 1 else 0.0 for v in held_out])
    best = int(np.argmin(scores))
    limit = scores[best] + tree.settings.se_rule * errors[best]
    chosen = max(b for b in range(len(betas)) if scores[b] <= limit)

    pruned = _subtree(tree, path[chosen][1])
    logger.info("Pruned tree from %d to %d leaves (CV C_n %.6f, best %.6f +/- %.6f)",
                tree.n_leaves, pruned.n_leaves, scores[chosen], scores[best], errors[best])
    return pruned
