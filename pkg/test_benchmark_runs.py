#!/usr/bin/env python3
"""
Benchmark runs over seeded synthetic logs

Slow end-to-end checks: exactness of the DP, surrogate identities, method
ordering on concave data, bound checks and pruning behaviour. Run with
`pytest -m slow test_benchmark_runs.py`.
"""

import itertools
import math
import sys
import time

import numpy as np
import pytest
from scipy import stats

sys.path.append('src')

from numeric_facet_partition.bounds import check_theorem1, check_theorem2, check_theorem3
from numeric_facet_partition.dp_opt import brute_force_partition, dp_partition, expected_rr, greedy_partition
from numeric_facet_partition.log_model import Entity, Impression, split_by_time
from numeric_facet_partition.metric import SeparatorSet, arr_evaluate, refined_rank
from numeric_facet_partition.partition_core import RatioVector, round_separators
from numeric_facet_partition.ratio_opt import (
    EmpiricalCdf,
    LookupCounter,
    OptimizerSettings,
    RatioArrEvaluator,
    cache_cdf,
    grid_search,
    optimize_ratio,
    ratio_partitioner,
    surrogate_cn,
)
from numeric_facet_partition.ratio_tree import TreeSettings, fit_tree, prune_tree, tree_partitioner
from numeric_facet_partition.synthetic import (
    EntityCountSpec,
    QueryCluster,
    SynthConfig,
    ValueCdfSpec,
    generate_synthetic,
)

pytestmark = pytest.mark.slow

NUM_SEEDS = 10
CONCAVE = ValueCdfSpec(kind="concave")
# 80% of clicks on the cheapest tenth; mixed with a linear cluster the log stays concave
STEEP = ValueCdfSpec(kind="piecewise", table=[(0.0, 0.0), (0.1, 0.8), (1.0, 1.0)])
LINEAR = ValueCdfSpec(kind="linear")

TREE = TreeSettings(max_depth=2, min_leaf=50, cv_folds=5)
OPTIMIZER = OptimizerSettings(restarts=5)


def ranked(values):
    return [Entity(id=f"e{j + 1}", value=v, rank=j + 1) for j, v in enumerate(values)]


def two_cluster_config(seed, n=2000):
    return SynthConfig(
        n_queries=n, seed=seed, feature_noise=0.0,
        clusters=[QueryCluster(weight=1, value_cdf=STEEP, feature_center=[0.0]),
                  QueryCluster(weight=1, value_cdf=LINEAR, feature_center=[1.0])],
    )


def test_dp_equals_brute_force():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    for _ in range(500):
        m = int(rng.integers(1, 13))
        entities = ranked(list(rng.integers(0, 20, size=m).astype(float)))
        p = rng.dirichlet(np.ones(m))
        k = int(rng.integers(1, 5))

        dp = expected_rr(entities, p, dp_partition(entities, p, k))
        brute = expected_rr(entities, p, brute_force_partition(entities, p, k))

        assert dp == pytest.approx(brute, abs=1e-12)
    assert time.perf_counter() - start < 10


def test_greedy_counterexample():
    tied = ranked([400, 100, 200, 300])
    tied_p = [0.2, 0.2, 0.3, 0.3]
    assert expected_rr(tied, tied_p, dp_partition(tied, tied_p, 3)) == pytest.approx(1.3)
    assert expected_rr(tied, tied_p, greedy_partition(tied, tied_p, 3)) == pytest.approx(1.3)

    trap = ranked([200, 300, 100, 400])
    trap_p = [0.3, 0.1, 0.3, 0.3]
    assert expected_rr(trap, trap_p, dp_partition(trap, trap_p, 3)) == pytest.approx(1.1)
    assert expected_rr(trap, trap_p, greedy_partition(trap, trap_p, 3)) == pytest.approx(1.3)


def test_quadratic_identity_and_linear_optimum():
    n = 10_000
    cdf = EmpiricalCdf.from_z(np.arange(1, n + 1) / n)

    worst = max(abs(surrogate_cn(cdf, [r]) - (2 * r * r - 2 * r + 1)) for r in np.arange(1, 100) / 100)
    fit = optimize_ratio(cdf, 2)

    assert worst <= 2 / n
    assert 0.48 <= fit.ratios.ratios[0] <= 0.52


@pytest.mark.parametrize("k", [2, 3, 4])
def test_quantile_is_near_optimal_on_linear_data(k):
    log = generate_synthetic(SynthConfig(n_queries=2000, entities_per_query=EntityCountSpec(fixed=50), seed=k))
    start = time.perf_counter()

    best = grid_search(log, k, objective="true_arr")
    quantile = RatioArrEvaluator(log).arr(RatioVector.quantile(k))

    assert best.value >= 0.98 * quantile
    assert best.value <= quantile + 1e-12
    assert time.perf_counter() - start < 300


def run_methods(seed, k):
    """Test ARR of quantile, global ratio and pruned tree on one seeded two-cluster log."""
    train, test = split_by_time(generate_synthetic(two_cluster_config(seed)), 0.7)

    quantile = RatioArrEvaluator(test).arr(RatioVector.quantile(k))
    ratios = optimize_ratio(cache_cdf(train), k, OPTIMIZER).ratios
    ratio = arr_evaluate(test, ratio_partitioner(ratios)).arr
    tree = prune_tree(fit_tree(train, k, TREE, OPTIMIZER), train)
    tree_arr = arr_evaluate(test, tree_partitioner(tree)).arr
    return quantile, ratio, tree_arr, tree


@pytest.mark.parametrize("k", [3, 4, 5])
def test_learning_helps_on_concave_data(k):
    results = np.array([run_methods(seed, k)[:3] for seed in range(NUM_SEEDS)])
    quantile, ratio, tree = results.T
    print(f"\n📊 k={k}: quantile {quantile.mean():.3f}, ratio {ratio.mean():.3f}, tree {tree.mean():.3f}")

    assert tree.mean() < ratio.mean() < quantile.mean()
    assert stats.ttest_rel(ratio, quantile, alternative="less").pvalue < 0.05
    assert stats.ttest_rel(tree, ratio, alternative="less").pvalue < 0.05


def test_cdf_cost_contract():
    log = generate_synthetic(SynthConfig(n_queries=5000, entities_per_query=EntityCountSpec(low=2, high=80), seed=1))
    cdf = cache_cdf(log)
    rng = np.random.default_rng(1)
    k = 4
    budget = k * math.ceil(math.log2(cdf.n0) + 1)
    counter = LookupCounter()

    seen = set()
    while len(seen) < 1000:
        ratios = tuple(np.sort(rng.choice(np.arange(1, 10_000) / 10_000, size=k - 1, replace=False)))
        if ratios in seen:
            continue
        seen.add(ratios)
        counter.reset()
        surrogate_cn(cdf, ratios, counter)
        assert counter.comparisons <= budget

    counter.reset()
    for r in seen.pop():
        cdf.recount(r, counter)
    assert counter.comparisons == (k - 1) * cdf.n


def test_refinement_monotonicity():
    rng = np.random.default_rng(2)
    for _ in range(10_000):
        m = int(rng.integers(1, 15))
        values = list(rng.integers(0, 10, size=m).astype(float))
        entities = tuple(ranked(values))
        imp = Impression(query_id="q", timestamp=0, entities=entities, clicked=f"e{int(rng.integers(1, m + 1))}")
        cuts = sorted(set(rng.uniform(-1, 11, size=int(rng.integers(0, 4))).round(1)))
        extra = round(float(rng.uniform(-1, 11)), 1)
        base = SeparatorSet(tuple(cuts), len(cuts) + 2)
        finer = SeparatorSet(tuple(sorted(set(cuts) | {extra})), len(cuts) + 2)

        assert refined_rank(imp, finer) <= refined_rank(imp, base)


@pytest.mark.parametrize("k,epsilon", list(itertools.product([2, 3], [0.05, 0.1])))
def test_theorem1_bound(k, epsilon):
    report = check_theorem1(CONCAVE, n=1000, k=k, epsilon=epsilon, trials=1000)

    assert report.passed
    assert report.inequality_violations == 0


@pytest.mark.parametrize("epsilon", [0.05, 0.1])
def test_theorem3_bound(epsilon):
    report = check_theorem3(CONCAVE, n=1000, epsilon=epsilon, trials=1000, neighborhood_radius=0.02)

    assert report.applicable
    assert report.passed


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_theorem2_widths(k):
    assert check_theorem2(CONCAVE, k, grid_resolution=500).passed


def test_pruning_collapses_noise():
    single_leaf = 0
    for seed in range(NUM_SEEDS):
        log = generate_synthetic(SynthConfig(n_queries=600, n_noise_features=2, value_cdf=CONCAVE, seed=seed))
        settings = TreeSettings(max_depth=2, min_leaf=50, max_split_candidates=4, split_restarts=1)
        tree = prune_tree(fit_tree(log, 3, settings, OptimizerSettings(restarts=2)), log)
        single_leaf += tree.root.is_leaf
    print(f"\n🔍 noise logs pruned to a single leaf: {single_leaf}/{NUM_SEEDS}")

    assert single_leaf >= 9


def test_pruning_keeps_cluster_split():
    for seed in range(NUM_SEEDS):
        tree = run_methods(seed, 3)[3]

        assert not tree.root.is_leaf
        assert tree.root.feature == 0


def test_rounding_random_sets():
    rng = np.random.default_rng(3)
    assert round_separators(SeparatorSet((149.7,), 2), 10).separators == (150,)
    for _ in range(10_000):
        separators = SeparatorSet(tuple(np.unique(rng.uniform(-1000, 1000, size=int(rng.integers(0, 8))))), 9)
        precision = float(rng.choice([0.01, 0.1, 1, 2.5, 10, 100]))

        rounded = round_separators(separators, precision).separators

        assert all(b > a for a, b in zip(rounded, rounded[1:]))
        assert all(abs(s / precision - round(s / precision)) < 1e-6 for s in rounded)


if __name__ == "__main__":
    print("=" * 60)
    print("🧪 BENCHMARK RUNS")
    print("=" * 60)
    sys.exit(pytest.main([__file__, "-v", "-s", "-m", "slow"]))
