#!/usr/bin/env python3
"""
Synthetic Search Log Generator

Generates desk-scale click logs with a controllable shape for the CDF of the
clicked entity's value quantile, an optional position bias on the clicked
rank, and optional feature-separable query clusters.
"""

import logging
import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, Field, PositiveInt, ValidationError, model_validator

from numeric_facet_partition.errors import ConfigError
from numeric_facet_partition.log_model import Entity, Impression, SearchLog

logger = logging.getLogger(__name__)

DEFAULT_SYNTH_CONFIG = Path(__file__).parent / "config" / "synthetic.yaml"


class ValueCdfSpec(BaseModel):
    """
    CDF F on [0, 1] of the clicked value quantile.

    linear: F(r) = r; concave: F(r) = 2r - r^2; convex: F(r) = r^2;
    piecewise: linear interpolation of a table of (r, F(r)) points.
    """

    kind: Literal["linear", "concave", "convex", "piecewise"] = "linear"
    table: Optional[List[Tuple[float, float]]] = Field(None, description="(r, F) points for kind=piecewise")

    @model_validator(mode="after")
    def _check_table(self) -> "ValueCdfSpec":
        if self.kind != "piecewise":
            return self
        if not self.table or len(self.table) < 2:
            raise ValueError("piecewise CDF needs a table of at least two (r, F) points")
        r = [p[0] for p in self.table]
        f = [p[1] for p in self.table]
        if r[0] != 0.0 or r[-1] != 1.0 or f[0] != 0.0 or f[-1] != 1.0:
            raise ValueError("piecewise CDF table must run from (0, 0) to (1, 1)")
        if any(b <= a for a, b in zip(r, r[1:])):
            raise ValueError("piecewise CDF abscissae must be strictly increasing")
        if any(b < a for a, b in zip(f, f[1:])):
            raise ValueError("piecewise CDF values must be non-decreasing")
        return self

    def cdf(self, r):
        r = np.clip(np.asarray(r, dtype=float), 0.0, 1.0)
        if self.kind == "linear":
            return r
        if self.kind == "concave":
            return 2.0 * r - r * r
        if self.kind == "convex":
            return r * r
        xs, fs = zip(*self.table)
        return np.interp(r, xs, fs)

    def ppf(self, u):
        """Inverse CDF."""
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        if self.kind == "linear":
            return u
        if self.kind == "concave":
            return 1.0 - np.sqrt(1.0 - u)
        if self.kind == "convex":
            return np.sqrt(u)
        xs, fs = zip(*self.table)
        return np.interp(u, fs, xs)


class EntityCountSpec(BaseModel):
    """Number of entities per query: fixed, or uniform over [low, high]."""

    fixed: Optional[PositiveInt] = None
    low: Optional[PositiveInt] = None
    high: Optional[PositiveInt] = None

    @model_validator(mode="after")
    def _check(self) -> "EntityCountSpec":
        if self.fixed is None and (self.low is None or self.high is None):
            raise ValueError("entities_per_query needs either 'fixed' or both 'low' and 'high'")
        if self.fixed is None and self.low > self.high:
            raise ValueError("entities_per_query: low must not exceed high")
        return self

    def draw(self, rng: np.random.Generator) -> int:
        if self.fixed is not None:
            return self.fixed
        return int(rng.integers(self.low, self.high + 1))


class QueryCluster(BaseModel):
    """A group of queries sharing a clicked-quantile CDF and a feature centre."""

    weight: float = Field(1.0, gt=0)
    value_cdf: ValueCdfSpec = Field(default_factory=ValueCdfSpec)
    feature_center: List[float] = Field(default_factory=list)


class SynthConfig(BaseModel):
    """Configuration of the synthetic log generator."""

    n_queries: PositiveInt = Field(1000, description="Number of impressions to generate")
    entities_per_query: EntityCountSpec = Field(default_factory=lambda: EntityCountSpec(fixed=50))
    value_cdf: ValueCdfSpec = Field(default_factory=ValueCdfSpec)
    click_position_bias: float = Field(0.0, ge=0, description="Exponent a in P(clicked rank = r) ~ r^-a")
    seed: int = Field(0, description="RNG seed")
    clusters: Optional[List[QueryCluster]] = Field(None, description="Optional query clusters (override value_cdf)")
    feature_noise: float = Field(0.1, ge=0, description="Std of Gaussian noise added to cluster feature centres")
    n_noise_features: int = Field(0, ge=0, description="Extra pure-noise feature dimensions")
    query_pool_size: Optional[PositiveInt] = Field(None, description="Re-use a fixed pool of queries")
    missing_value_rate: float = Field(0.0, ge=0, lt=1, description="Share of non-clicked entities without a value")
    price_log_mean: float = Field(4.6, description="Mean of log facet value")
    price_log_sigma: float = Field(0.6, gt=0, description="Std of log facet value")
    start_ts: int = Field(1_500_000_000, description="Timestamp of the first impression")

    @model_validator(mode="after")
    def _check_clusters(self) -> "SynthConfig":
        if self.clusters:
            dims = {len(c.feature_center) for c in self.clusters}
            if len(dims) != 1:
                raise ValueError("all cluster feature centres must have the same dimension")
        return self

    @property
    def n_features(self) -> int:
        centre_dim = len(self.clusters[0].feature_center) if self.clusters else 0
        return centre_dim + self.n_noise_features


def load_synth_config(path: Optional[Union[str, Path]] = None, **overrides) -> SynthConfig:
    """Load a generator config from YAML (packaged defaults when path is None)."""
    path = Path(path) if path else DEFAULT_SYNTH_CONFIG
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return SynthConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid generator config {path}: {e}") from e


class _QueryTemplate:
    """Fixed catalogue of a pooled query: cluster and entity values."""

    def __init__(self, query_id: str, cluster: int, values: np.ndarray, features_center: np.ndarray):
        self.query_id = query_id
        self.cluster = cluster
        self.values = values
        self.features_center = features_center


class SyntheticLogGenerator:
    """
    Generates deterministic synthetic search logs.

    For every impression the clicked entity is the max(1, ceil(q*m))-th
    smallest value with q = F^-1(U), so the share of impressions whose clicked
    quantile z is at most j/m equals F(j/m).
    """

    def __init__(self, config: SynthConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        if config.clusters:
            self.clusters = list(config.clusters)
        else:
            self.clusters = [QueryCluster(weight=1.0, value_cdf=config.value_cdf, feature_center=[])]
        weights = np.array([c.weight for c in self.clusters], dtype=float)
        self.cluster_probs = weights / weights.sum()
        self._pool: Optional[List[_QueryTemplate]] = None

    def generate(self) -> SearchLog:
        cfg = self.config
        if cfg.query_pool_size:
            self._pool = [self._new_template(f"q{j:05d}") for j in range(cfg.query_pool_size)]

        impressions = []
        for i in range(cfg.n_queries):
            if self._pool:
                template = self._pool[int(self.rng.integers(len(self._pool)))]
            else:
                template = self._new_template(f"q{i:06d}")
            impressions.append(self._impression(i, template))

        log = SearchLog.from_impressions(impressions)
        logger.info("Generated %d synthetic impressions (m=%.1f, %d clusters)",
                    log.stats.n, log.stats.m, len(self.clusters))
        return log

    def _new_template(self, query_id: str) -> _QueryTemplate:
        cluster = int(self.rng.choice(len(self.clusters), p=self.cluster_probs))
        m = self.config.entities_per_query.draw(self.rng)
        values = np.round(np.exp(self.rng.normal(self.config.price_log_mean, self.config.price_log_sigma, size=m)), 6)
        center = np.asarray(self.clusters[cluster].feature_center, dtype=float)
        return _QueryTemplate(query_id, cluster, values, center)

    def _click_rank(self, m: int) -> int:
        bias = self.config.click_position_bias
        if bias == 0.0:
            return int(self.rng.integers(1, m + 1))
        weights = np.arange(1, m + 1, dtype=float) ** (-bias)
        return int(self.rng.choice(m, p=weights / weights.sum())) + 1

    def _impression(self, i: int, template: _QueryTemplate) -> Impression:
        cfg = self.config
        values = template.values
        m = len(values)
        order = np.argsort(values, kind="stable")

        q = float(self.clusters[template.cluster].value_cdf.ppf(self.rng.random()))
        position = min(max(1, math.ceil(q * m)), m)
        clicked_idx = int(order[position - 1])

        click_rank = self._click_rank(m)
        other_ranks = [r for r in range(1, m + 1) if r != click_rank]
        self.rng.shuffle(other_ranks)

        missing = self.rng.random(m) < cfg.missing_value_rate
        entities = []
        others = iter(other_ranks)
        for j in range(m):
            is_clicked = j == clicked_idx
            entities.append(Entity(
                id=f"{template.query_id}-e{j:03d}",
                value=None if (missing[j] and not is_clicked) else float(values[j]),
                rank=click_rank if is_clicked else next(others),
            ))
        entities.sort(key=lambda e: e.rank)

        features = None
        if cfg.n_features:
            noisy = template.features_center + self.rng.normal(0.0, cfg.feature_noise, size=len(template.features_center))
            noise = self.rng.normal(0.0, 1.0, size=cfg.n_noise_features)
            features = tuple(float(x) for x in np.concatenate([noisy, noise]))

        return Impression(
            query_id=template.query_id,
            timestamp=cfg.start_ts + 60 * i,
            entities=tuple(entities),
            clicked=f"{template.query_id}-e{clicked_idx:03d}",
            features=features,
        )


def generate_synthetic(config: SynthConfig) -> SearchLog:
    """Generate a synthetic log; identical configs (including seed) give identical logs."""
    return SyntheticLogGenerator(config).generate()
