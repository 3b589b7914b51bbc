#!/usr/bin/env python3
"""
Per-Query Partitioning by Expected Refined Rank

Click-probability models, the expected refined rank of a partition, and the
exact dynamic-programming partitioner with brute-force and greedy references.
"""

import itertools
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from numeric_facet_partition.errors import EmptyLogError, InfeasibleError
from numeric_facet_partition.log_model import Entity, Impression, SearchLog, valued_entities
from numeric_facet_partition.metric import SeparatorSet
from numeric_facet_partition.partition_core import candidate_midpoints

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-12
DEFAULT_ENUMERATION_CAP = 1_000_000


class ClickModelSettings(BaseModel):
    """Click model options of an experiment."""

    kind: Literal["mixture", "rank_based"] = Field("mixture", description="Counts mixture or p(e) ~ 1/rank")
    lam: float = Field(0.5, ge=0.0, le=1.0, description="Weight of the per-query component")


@dataclass
class ClickModel:
    """
    Click probability model.

    mixture: p(e) = lam * p_query(e) + (1 - lam) * p_category(e), each component
    normalised over the valued entities of the impression.
    rank_based: p(e) proportional to 1 / rank(e).
    """
    kind: str = "mixture"
    lam: float = 0.5
    query_counts: Dict[Tuple[str, str], int] = field(default_factory=dict)
    category_counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lam": self.lam,
            "query_counts": [[q, e, c] for (q, e), c in sorted(self.query_counts.items())],
            "category_counts": dict(sorted(self.category_counts.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClickModel":
        return cls(
            kind=data["kind"],
            lam=float(data["lam"]),
            query_counts={(q, e): int(c) for q, e, c in data.get("query_counts", [])},
            category_counts={e: int(c) for e, c in data.get("category_counts", {}).items()},
        )


def fit_click_model(train: SearchLog, lam: float = 0.5, kind: str = "mixture") -> ClickModel:
    """Tabulate first-click counts per (query, entity) and per entity over the training log."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    if kind == "rank_based":
        return ClickModel(kind=kind, lam=lam)
    if kind != "mixture":
        raise ValueError(f"unknown click model kind {kind!r}")
    if len(train) == 0:
        raise EmptyLogError("cannot fit a click model on an empty training log")

    query_counts = Counter((imp.query_id, imp.clicked) for imp in train.impressions)
    category_counts = Counter(imp.clicked for imp in train.impressions)
    logger.info("Fitted click model on %d clicks (%d query-entity pairs, %d entities)",
                len(train), len(query_counts), len(category_counts))
    return ClickModel(kind=kind, lam=lam, query_counts=dict(query_counts), category_counts=dict(category_counts))


def _normalised(counts: np.ndarray) -> np.ndarray:
    total = counts.sum()
    return counts / total if total > 0 else np.zeros_like(counts)


def click_probabilities(model: ClickModel, impression: Impression) -> np.ndarray:
    """
    Click probability per valued entity, aligned with valued_entities(impression).

    Sums to 1. Impressions where neither component has any mass fall back to
    the uniform distribution.
    """
    entities = valued_entities(impression)
    if model.kind == "rank_based":
        weights = np.array([1.0 / e.rank for e in entities])
        return weights / weights.sum()

    pq = _normalised(np.array([model.query_counts.get((impression.query_id, e.id), 0) for e in entities], dtype=float))
    pc = _normalised(np.array([model.category_counts.get(e.id, 0) for e in entities], dtype=float))
    mix = model.lam * pq + (1.0 - model.lam) * pc
    if mix.sum() <= 0:
        # one component may still have mass when lam sits on a boundary
        mix = pq + pc
    if mix.sum() <= 0:
        return np.full(len(entities), 1.0 / len(entities))
    return mix / mix.sum()


def save_click_model(model: ClickModel, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model.to_dict(), f, indent=2)
        f.write("\n")


def load_click_model(path: Union[str, Path]) -> ClickModel:
    with open(path, "r", encoding="utf-8") as f:
        return ClickModel.from_dict(json.load(f))


def expected_rr(entities: Sequence[Entity], p: Sequence[float], separators: SeparatorSet) -> float:
    """
    Expected refined rank: sum over e of p(e) times the refined rank e would
    get if it were the clicked entity.
    """
    values = np.array([e.value for e in entities], dtype=float)
    ranks = np.array([e.rank for e in entities])
    probs = np.asarray(p, dtype=float)
    if len(probs) != len(values):
        raise ValueError(f"{len(probs)} probabilities for {len(values)} entities")

    ranges = np.searchsorted(np.asarray(separators.separators, dtype=float), values, side="right")
    same_range = ranges[:, None] == ranges[None, :]
    at_or_above = ranks[None, :] <= ranks[:, None]
    rr = (same_range & at_or_above).sum(axis=1)
    return float(np.dot(probs, rr))


class _FenwickTree:
    """Prefix sums over 1-based positions."""

    def __init__(self, size: int):
        self.tree = [0.0] * (size + 1)

    def add(self, i: int, delta: float) -> None:
        while i < len(self.tree):
            self.tree[i] += delta
            i += i & -i

    def prefix(self, i: int) -> float:
        total = 0.0
        while i > 0:
            total += self.tree[i]
            i -= i & -i
        return total


def _group_by_value(entities: Sequence[Entity], p: Sequence[float]):
    """Distinct sorted values, and per value the (rank position, p) members."""
    if len(entities) == 0:
        raise ValueError("at least one valued entity is required")
    if len(p) != len(entities):
        raise ValueError(f"{len(p)} probabilities for {len(entities)} entities")
    rank_order = sorted(range(len(entities)), key=lambda i: entities[i].rank)
    position = {i: pos + 1 for pos, i in enumerate(rank_order)}

    groups: Dict[float, List[Tuple[int, float]]] = {}
    for i, e in enumerate(entities):
        groups.setdefault(e.value, []).append((position[i], float(p[i])))
    distinct = sorted(groups)
    return distinct, [groups[v] for v in distinct]


def _segment_costs(groups: List[List[Tuple[int, float]]], n: int) -> np.ndarray:
    """
    cost[a, b]: expected-RR contribution of one range holding value groups a..b-1.

    Adding entity x to a range adds p(x) * (1 + #members ranked above x) plus
    the p mass of members ranked below x.
    """
    d = len(groups)
    cost = np.zeros((d + 1, d + 1))
    for a in range(d):
        counts = _FenwickTree(n)
        mass = _FenwickTree(n)
        total_mass, running = 0.0, 0.0
        for b in range(a, d):
            for pos, prob in groups[b]:
                above = counts.prefix(pos - 1)
                mass_below = total_mass - mass.prefix(pos)
                running += prob * (1.0 + above) + mass_below
                counts.add(pos, 1.0)
                mass.add(pos, prob)
                total_mass += prob
            cost[a, b + 1] = running
    return cost


def _midpoint(distinct: Sequence[float], b: int) -> float:
    return (distinct[b - 1] + distinct[b]) / 2.0


def dp_partition(entities: Sequence[Entity], p: Sequence[float], k: int) -> SeparatorSet:
    """
    Exact minimiser of expected_rr over candidate midpoints.

    Uses min(k, #distinct values) ranges; among optima the lexicographically
    smallest separator sequence wins.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    distinct, groups = _group_by_value(entities, p)
    d = len(distinct)
    ranges = min(k, d)
    if ranges < k:
        logger.warning("DP partition: %d ranges requested but only %d distinct values", k, d)
    if ranges == 1:
        return SeparatorSet((), k)

    cost = _segment_costs(groups, len(entities))

    # best[j, a]: minimal cost of splitting groups a..d-1 into exactly j ranges
    best = np.full((ranges + 1, d + 1), np.inf)
    choice = np.zeros((ranges + 1, d + 1), dtype=int)
    best[1, :d] = cost[:d, d]
    for j in range(2, ranges + 1):
        for a in range(d - j, -1, -1):
            for b in range(a + 1, d - j + 2):
                candidate = cost[a, b] + best[j - 1, b]
                if candidate < best[j, a] - TIE_TOLERANCE:
                    best[j, a] = candidate
                    choice[j, a] = b

    separators = []
    a = 0
    for j in range(ranges, 1, -1):
        b = choice[j, a]
        separators.append(_midpoint(distinct, b))
        a = b
    return SeparatorSet(tuple(separators), k)


def brute_force_partition(entities: Sequence[Entity], p: Sequence[float], k: int,
                          cap: int = DEFAULT_ENUMERATION_CAP) -> SeparatorSet:
    """Enumerate every choice of min(k, #distinct) - 1 midpoints; same tie rule as dp_partition."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    midpoints = candidate_midpoints(entities)
    n_separators = min(k - 1, len(midpoints))
    total = math.comb(len(midpoints), n_separators)
    if total > cap:
        raise InfeasibleError(f"brute force would enumerate {total} partitions (cap {cap})")

    best_separators: Tuple[float, ...] = ()
    best_value = math.inf
    for combo in itertools.combinations(midpoints, n_separators):
        value = expected_rr(entities, p, SeparatorSet(combo, k))
        if value < best_value - TIE_TOLERANCE:
            best_value, best_separators = value, combo
    return SeparatorSet(best_separators, k)


def greedy_partition(entities: Sequence[Entity], p: Sequence[float], k: int) -> SeparatorSet:
    """Add separators one at a time, each the midpoint that lowers expected_rr most (first wins ties)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    midpoints = candidate_midpoints(entities)
    chosen: List[float] = []
    for _ in range(min(k - 1, len(midpoints))):
        best_value, best_mid = math.inf, None
        for mid in midpoints:
            if mid in chosen:
                continue
            value = expected_rr(entities, p, SeparatorSet(tuple(sorted(chosen + [mid])), k))
            if value < best_value - TIE_TOLERANCE:
                best_value, best_mid = value, mid
        chosen.append(best_mid)
    return SeparatorSet(tuple(sorted(chosen)), k)
