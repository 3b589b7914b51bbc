#!/usr/bin/env python3
"""
Experiment Runner

Trains a partitioning method on the training split, evaluates ARR on the test
split, and compares methods with paired t-tests on per-impression refined ranks.
"""

import copy
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, Field, PositiveFloat, PositiveInt, ValidationError, model_validator
from scipy import stats

from numeric_facet_partition.dp_opt import (
    ClickModelSettings,
    click_probabilities,
    dp_partition,
    fit_click_model,
    load_click_model,
    save_click_model,
)
from numeric_facet_partition.errors import ConfigError, InfeasibleError, SplitMismatchError
from numeric_facet_partition.log_model import Impression, SearchLog, parse_log, valued_entities
from numeric_facet_partition.metric import EvalReport, Partitioner, SeparatorSet, arr_evaluate
from numeric_facet_partition.partition_core import RatioVector, quantile_partition, round_separators
from numeric_facet_partition.ratio_opt import (
    OptimizerSettings,
    cache_cdf,
    grid_search,
    optimize_ratio,
    ratio_partitioner,
)
from numeric_facet_partition.ratio_tree import (
    FeatureOptions,
    TreeSettings,
    fit_tree,
    load_tree,
    prune_tree,
    save_tree,
    tree_partitioner,
)

logger = logging.getLogger(__name__)

DEFAULT_EXPERIMENT_CONFIG = Path(__file__).parent / "config" / "experiment.yaml"
SEED_ENV_VAR = "FACET_PARTITION_SEED"

TRAINED_METHODS = ("dp", "ratio", "tree", "grid")


class ExperimentConfig(BaseModel):
    """One method run: what to train, on which split, and where results go."""

    method: Literal["quantile", "dp", "ratio", "tree", "grid"] = Field("quantile", description="Partitioning method")
    name: Optional[str] = Field(None, description="Label in reports (defaults to the method)")
    k: PositiveInt = Field(3, description="Number of ranges")
    seed: Optional[int] = Field(None, description="Seed for every random choice of the run")
    click: ClickModelSettings = Field(default_factory=ClickModelSettings)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    tree: TreeSettings = Field(default_factory=TreeSettings)
    features: FeatureOptions = Field(default_factory=FeatureOptions)
    prune: bool = Field(True, description="Cost-complexity prune the tree")
    grid_objective: Literal["surrogate", "true_arr"] = Field("surrogate", description="Grid-search objective")
    rounding_precision: Optional[PositiveFloat] = Field(None, description="Round separators to this precision")
    train_path: Optional[Path] = Field(None, description="Training log (JSON lines)")
    test_path: Optional[Path] = Field(None, description="Test log (JSON lines)")
    model_in: Optional[Path] = Field(None, description="Load a fitted model instead of training")
    model_out: Optional[Path] = Field(None, description="Write the fitted model here")
    report_out: Optional[Path] = Field(None, description="Directory for report CSV and summary")

    @model_validator(mode="after")
    def _check_method_inputs(self) -> "ExperimentConfig":
        if self.method in TRAINED_METHODS and self.train_path is None and self.model_in is None:
            raise ValueError(f"method {self.method!r} needs train_path or model_in")
        if self.seed is not None:
            self.optimizer = self.optimizer.model_copy(update={"seed": self.seed})
        return self

    @property
    def label(self) -> str:
        return self.name or self.method


def _deep_merge(base: dict, update: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        elif value is not None:
            merged[key] = value
    return merged


def _read_yaml(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


def load_experiment_config(path: Optional[Union[str, Path]] = None, **overrides) -> ExperimentConfig:
    """
    Packaged defaults, then the YAML file, then keyword overrides (nested dicts merge).

    The seed falls back to FACET_PARTITION_SEED when neither file nor override sets it.
    """
    data = _read_yaml(DEFAULT_EXPERIMENT_CONFIG)
    if path is not None:
        data = _deep_merge(data, _read_yaml(Path(path)))
    data = _deep_merge(data, overrides)
    if data.get("seed") is None and os.getenv(SEED_ENV_VAR):
        try:
            data["seed"] = int(os.environ[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {os.environ[SEED_ENV_VAR]!r}")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config {path or DEFAULT_EXPERIMENT_CONFIG}: {e}") from e


def save_ratio_vector(ratios: RatioVector, path: Union[str, Path], value: Optional[float] = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"k": ratios.k, "ratios": list(ratios.ratios), "train_cn": value}, f, indent=2)
        f.write("\n")


def load_ratio_vector(path: Union[str, Path]) -> RatioVector:
    with open(path, "r", encoding="utf-8") as f:
        return RatioVector(tuple(json.load(f)["ratios"]))


def split_fingerprint(log: SearchLog) -> str:
    """Digest of (query_id, timestamp, clicked) over a log, to tell test splits apart."""
    digest = hashlib.sha256()
    for imp in log.impressions:
        digest.update(f"{imp.query_id}\t{imp.timestamp}\t{imp.clicked}\n".encode("utf-8"))
    return digest.hexdigest()


@dataclass
class RunResult:
    """Evaluated run of one configuration."""
    config: ExperimentConfig
    report: EvalReport
    test_fingerprint: str
    model: Any = None
    train_seconds: float = 0.0
    written: List[Path] = field(default_factory=list)


def _with_rounding(partitioner: Partitioner, precision: Optional[float]) -> Partitioner:
    if precision is None:
        return partitioner

    def rounded(impression: Impression) -> SeparatorSet:
        return round_separators(partitioner(impression), precision)
    return rounded


def build_partitioner(config: ExperimentConfig, train: Optional[SearchLog]) -> Tuple[Partitioner, Any, Dict[str, float]]:
    """
    Train (or load) the configured method.

    Returns the per-impression partitioner, the fitted model, and extra numbers
    for the summary.
    """
    k = config.k
    extras: Dict[str, float] = {}

    if config.method == "quantile":
        return (lambda imp: quantile_partition(valued_entities(imp), k)), None, extras

    if config.method == "dp":
        if config.model_in:
            model = load_click_model(config.model_in)
        else:
            model = fit_click_model(train, lam=config.click.lam, kind=config.click.kind)
        if config.model_out:
            save_click_model(model, config.model_out)

        def partition(imp: Impression) -> SeparatorSet:
            return dp_partition(valued_entities(imp), click_probabilities(model, imp), k)
        return partition, model, extras

    if config.method in ("ratio", "grid"):
        if config.method == "grid" and k > 4:
            raise InfeasibleError(f"grid search is intractable for k={k} (k > 4)")
        if config.model_in:
            ratios = load_ratio_vector(config.model_in)
        elif config.method == "ratio":
            fit = optimize_ratio(cache_cdf(train), k, config.optimizer)
            ratios = fit.ratios
            extras.update(train_cn=fit.value, n_eval=float(fit.n_eval))
        else:
            result = grid_search(train, k, objective=config.grid_objective)
            ratios = result.ratios
            extras.update(train_objective=result.value, n_evaluated=float(result.n_evaluated))
        if config.model_out:
            save_ratio_vector(ratios, config.model_out, extras.get("train_cn", extras.get("train_objective")))
        return ratio_partitioner(ratios), ratios, extras

    if config.model_in:
        tree = load_tree(config.model_in)
    else:
        tree = fit_tree(train, k, config.tree, config.optimizer, config.features)
        extras["leaves_grown"] = float(tree.n_leaves)
        if config.prune:
            tree = prune_tree(tree, train)
    extras.update(leaves=float(tree.n_leaves), train_cn=tree.training_cost())
    if config.model_out:
        save_tree(tree, config.model_out)
    return tree_partitioner(tree), tree, extras


def evaluate_method(config: ExperimentConfig, train: Optional[SearchLog], test: SearchLog) -> RunResult:
    """Train on train, evaluate ARR on test; no files are read."""
    start = time.perf_counter()
    partitioner, model, extras = build_partitioner(config, train)
    train_seconds = time.perf_counter() - start

    partitioner = _with_rounding(partitioner, config.rounding_precision)
    report = arr_evaluate(test, partitioner, method=config.label, k=config.k)
    report.extras.update(extras)
    logger.info("%s (k=%d): ARR %.4f on %d test impressions", config.label, config.k, report.arr, report.n)
    return RunResult(config=config, report=report, test_fingerprint=split_fingerprint(test),
                     model=model, train_seconds=train_seconds)


def cmd_run(config: ExperimentConfig) -> RunResult:
    """
    Run one configuration from files: read the splits, train if the method
    needs it, evaluate, and write the report CSV and summary when report_out
    is set. Input files are only read.
    """
    if config.test_path is None:
        raise ConfigError("test_path is required")
    test = parse_log(config.test_path)
    train = None
    if config.method in TRAINED_METHODS and config.model_in is None:
        train = parse_log(config.train_path)

    result = evaluate_method(config, train, test)
    if config.report_out:
        out = Path(config.report_out)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{config.label}_k{config.k}"
        result.report.to_csv(out / f"{stem}_rr.csv")
        result.report.write_summary(out / f"{stem}_summary.json")
        result.written = [out / f"{stem}_rr.csv", out / f"{stem}_summary.json"]
    return result


def paired_ttest(a: np.ndarray, b: np.ndarray) -> Tuple[float, float]:
    """Paired t-test on per-impression refined ranks; identical vectors give t = 0, p = 1."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if len(diff) == 0 or np.all(diff == 0):
        return 0.0, 1.0
    if np.all(diff == diff[0]):
        # constant non-zero difference: zero variance
        return float(np.copysign(np.inf, diff[0])), 0.0
    result = stats.ttest_rel(a, b)
    return float(result.statistic), float(result.pvalue)


@dataclass
class ComparisonResult:
    """ARR table (method x k) and pairwise t-tests."""
    runs: List[RunResult]
    arr_table: pd.DataFrame
    pairs: pd.DataFrame

    def write(self, out_dir: Union[str, Path]) -> List[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.arr_table.to_csv(out / "arr_table.csv", index=False)
        self.pairs.to_csv(out / "pairs.csv", index=False)
        return [out / "arr_table.csv", out / "pairs.csv"]


def compare_runs(runs: List[RunResult], ttest: bool = True) -> ComparisonResult:
    """Tabulate already evaluated runs; they must share the same test split."""
    if len(runs) < 2:
        raise ConfigError("comparison needs at least two runs")
    fingerprints = {r.test_fingerprint for r in runs}
    if len(fingerprints) > 1:
        raise SplitMismatchError("runs were evaluated on different test splits")

    arr_table = pd.DataFrame(
        [{"method": r.config.label, "k": r.config.k, "arr": r.report.arr, "n": r.report.n} for r in runs])

    rows = []
    if ttest:
        for a, b in combinations(runs, 2):
            if a.config.k != b.config.k:
                continue
            t, p = paired_ttest(a.report.rr_values, b.report.rr_values)
            rows.append({"method_a": a.config.label, "method_b": b.config.label, "k": a.config.k, "t": t, "p": p})
    pairs = pd.DataFrame(rows, columns=["method_a", "method_b", "k", "t", "p"])
    return ComparisonResult(runs=runs, arr_table=arr_table, pairs=pairs)


def cmd_compare(configs: List[ExperimentConfig], paired_ttest_flag: bool = True,
                out_dir: Optional[Union[str, Path]] = None) -> ComparisonResult:
    """Run every configuration and compare them on their common test split."""
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configurations")
    comparison = compare_runs([cmd_run(c) for c in configs], ttest=paired_ttest_flag)
    if out_dir is not None:
        comparison.write(out_dir)
    return comparison
