#!/usr/bin/env python3
"""
Tests for the ratio regression tree: features, growth, routing, persistence and pruning
"""

import sys

import numpy as np
import pytest

sys.path.append('src')

from numeric_facet_partition.errors import DimensionMismatchError
from numeric_facet_partition.log_model import Entity, Impression, SearchLog
from numeric_facet_partition.metric import arr_evaluate
from numeric_facet_partition.ratio_opt import OptimizerSettings, cache_cdf, optimize_ratio
from numeric_facet_partition.ratio_tree import (
    FeatureOptions,
    TreeSettings,
    cost_complexity_path,
    extract_features,
    fit_tree,
    load_tree,
    predict_ratio,
    prune_tree,
    save_tree,
    tree_partitioner,
)
from numeric_facet_partition.synthetic import (
    EntityCountSpec,
    QueryCluster,
    SynthConfig,
    ValueCdfSpec,
    generate_synthetic,
)

FAST = OptimizerSettings(restarts=2)


def impression(values, features=None, clicked=1):
    entities = tuple(Entity(id=f"e{j + 1}", value=v, rank=j + 1) for j, v in enumerate(values))
    return Impression(query_id="q", timestamp=0, entities=entities, clicked=f"e{clicked}", features=features)


def two_cluster_log(n=400, seed=0, noise_features=0):
    """Concave clicks at feature 0, convex clicks at feature 1."""
    return generate_synthetic(SynthConfig(
        n_queries=n, seed=seed, feature_noise=0.0, n_noise_features=noise_features,
        entities_per_query=EntityCountSpec(fixed=20),
        clusters=[QueryCluster(weight=1, value_cdf=ValueCdfSpec(kind="concave"), feature_center=[0.0]),
                  QueryCluster(weight=1, value_cdf=ValueCdfSpec(kind="convex"), feature_center=[1.0])],
    ))


def test_quartile_features():
    imp = impression([100, 200, 300, 400])

    assert list(extract_features(imp, FeatureOptions(quartiles=True))) == [200, 300, 400]


def test_provided_features_pass_through():
    imp = impression([100, 200], features=(0.1, 0.2))

    assert list(extract_features(imp)) == [0.1, 0.2]
    assert list(extract_features(imp, FeatureOptions(quartiles=True))) == [0.1, 0.2, 200, 200, 200]
    assert extract_features(imp, FeatureOptions(use_provided=False)).size == 0


def test_single_value_quartiles():
    assert list(extract_features(impression([42]), FeatureOptions(quartiles=True))) == [42, 42, 42]


def test_quartiles_ignore_missing_values():
    imp = impression([None, 300, 100, None, 200, 400], clicked=2)

    assert list(extract_features(imp, FeatureOptions(quartiles=True))) == [200, 300, 400]


def test_no_features_gives_single_leaf(caplog):
    log = generate_synthetic(SynthConfig(n_queries=200, seed=1))

    tree = fit_tree(log, 3, optimizer=FAST)

    assert tree.root.is_leaf
    assert tree.n_leaves == 1
    assert "single leaf" in caplog.text


def test_zero_split_tree_equals_global_optimum():
    log = two_cluster_log(300)
    settings = TreeSettings(max_depth=0)

    tree = fit_tree(log, 3, settings, FAST)

    assert tree.root.is_leaf
    assert tree.root.ratios == optimize_ratio(cache_cdf(log), 3, FAST).ratios


@pytest.mark.parametrize("criterion", ["min_cn", "mse"])
def test_tree_finds_separating_feature(criterion):
    log = two_cluster_log()

    tree = fit_tree(log, 2, TreeSettings(criterion=criterion, max_depth=1), FAST)

    assert tree.root.feature == 0
    assert tree.root.threshold == pytest.approx(0.5)
    assert tree.root.left.ratios.ratios[0] < 0.5 < tree.root.right.ratios.ratios[0]
    assert tree.root.left.n_samples + tree.root.right.n_samples == len(log)


def test_split_lowers_training_cost():
    log = two_cluster_log()

    split = fit_tree(log, 2, TreeSettings(max_depth=1), FAST)
    stump = fit_tree(log, 2, TreeSettings(max_depth=0), FAST)

    assert split.training_cost() < stump.training_cost()


def test_leaves_respect_min_leaf():
    log = two_cluster_log(500, noise_features=1)
    settings = TreeSettings(criterion="mse", min_leaf=60, max_depth=3)

    tree = fit_tree(log, 2, settings, FAST)

    assert all(leaf.n_samples >= 60 for leaf in tree.leaves())
    assert sum(leaf.n_samples for leaf in tree.leaves()) == len(log)


def test_routing_goes_right_above_threshold():
    tree = fit_tree(two_cluster_log(), 2, TreeSettings(max_depth=1), FAST)

    assert predict_ratio(tree, [0.5]) == tree.root.left.ratios
    assert predict_ratio(tree, [0.5001]) == tree.root.right.ratios


def test_predict_dimension_mismatch():
    tree = fit_tree(two_cluster_log(200), 2, TreeSettings(max_depth=1), FAST)

    with pytest.raises(DimensionMismatchError):
        predict_ratio(tree, [0.0, 1.0])


def test_inconsistent_feature_lengths_rejected():
    log = SearchLog.from_impressions([impression([1, 2], features=(0.1,)), impression([1, 2], features=(0.1, 0.2))])

    with pytest.raises(DimensionMismatchError):
        fit_tree(log, 2, optimizer=FAST)


def test_tree_partitioner_beats_single_ratio():
    train = two_cluster_log(400, seed=2)
    test = two_cluster_log(400, seed=3)
    tree = fit_tree(train, 2, TreeSettings(max_depth=1), FAST)
    stump = fit_tree(train, 2, TreeSettings(max_depth=0), FAST)

    assert arr_evaluate(test, tree_partitioner(tree)).arr <= arr_evaluate(test, tree_partitioner(stump)).arr


def test_save_load(tmp_path):
    tree = fit_tree(two_cluster_log(300), 3, TreeSettings(criterion="mse", max_depth=2, min_leaf=30), FAST,
                    FeatureOptions(quartiles=True))
    path = tmp_path / "tree.json"

    save_tree(tree, path)
    loaded = load_tree(path)

    assert loaded.to_dict() == tree.to_dict()
    assert loaded.features.quartiles
    assert loaded.n_features == 4


def test_cost_complexity_path_is_nested():
    log = two_cluster_log(500, noise_features=2)
    tree = fit_tree(log, 2, TreeSettings(criterion="mse", min_leaf=30, max_depth=3), FAST)

    path = cost_complexity_path(tree)

    alphas = [alpha for alpha, _ in path]
    assert alphas == sorted(alphas)
    for (_, smaller), (_, larger) in zip(path, path[1:]):
        assert smaller < larger
    assert tree.root.node_id in path[-1][1]


def test_pruned_tree_is_a_subtree():
    log = two_cluster_log(400, noise_features=2)
    settings = TreeSettings(criterion="mse", min_leaf=30, max_depth=3, cv_folds=4)
    tree = fit_tree(log, 2, settings, FAST)

    pruned = prune_tree(tree, log)

    full = {node.node_id: node for node in tree.root.walk()}
    assert pruned.root.node_id == tree.root.node_id
    for node in pruned.root.walk():
        assert node.ratios == full[node.node_id].ratios
        if not node.is_leaf:
            assert (node.feature, node.threshold) == (full[node.node_id].feature, full[node.node_id].threshold)
    assert pruned.n_leaves <= tree.n_leaves


def test_pruning_keeps_separating_split():
    log = two_cluster_log(400, seed=4)
    tree = fit_tree(log, 2, TreeSettings(max_depth=2, min_leaf=40, cv_folds=4), FAST)

    pruned = prune_tree(tree, log)

    assert not pruned.root.is_leaf
    assert pruned.root.feature == 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pruning_keeps_split_between_steep_and_linear_clusters(seed):
    steep = ValueCdfSpec(kind="piecewise", table=[(0.0, 0.0), (0.1, 0.8), (1.0, 1.0)])
    log = generate_synthetic(SynthConfig(
        n_queries=600, seed=seed, feature_noise=0.0,
        entities_per_query=EntityCountSpec(fixed=20),
        clusters=[QueryCluster(weight=1, value_cdf=steep, feature_center=[0.0]),
                  QueryCluster(weight=1, value_cdf=ValueCdfSpec(kind="linear"), feature_center=[1.0])],
    ))
    tree = fit_tree(log, 3, TreeSettings(max_depth=2, min_leaf=40, cv_folds=4), FAST)

    pruned = prune_tree(tree, log)

    assert not pruned.root.is_leaf
    assert pruned.root.feature == 0


def test_pruning_a_leaf_is_a_no_op():
    tree = fit_tree(generate_synthetic(SynthConfig(n_queries=100, seed=5)), 2, optimizer=FAST)

    assert prune_tree(tree, SearchLog.from_impressions([])) is tree


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
