#!/usr/bin/env python3
"""
Partition Primitives

Quantile (equi-depth) baseline, candidate midpoints, conversion of a ratio
vector into separating values, and rounding of separators.
"""

import logging
import math
from dataclasses import dataclass
from decimal import Decimal
from typing import List, Optional, Sequence, Tuple

import numpy as np

from numeric_facet_partition.log_model import Entity
from numeric_facet_partition.metric import SeparatorSet

logger = logging.getLogger(__name__)

# Above this many values, order statistics come from np.partition rather than a full sort.
SELECTION_THRESHOLD = 256


@dataclass(frozen=True)
class RatioVector:
    """
    Relative-ratio representation of a partition: 0 < r_1 < ... < r_{k-1} < 1.

    Implicit r_0 = 0 and r_k = 1; the widths r_j - r_{j-1} are the target
    shares of entities per range.
    """
    ratios: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if any(not 0.0 < r < 1.0 for r in self.ratios):
            raise ValueError(f"ratios must lie in (0, 1): {self.ratios}")
        if any(b <= a for a, b in zip(self.ratios, self.ratios[1:])):
            raise ValueError(f"ratios must be strictly increasing: {self.ratios}")

    @classmethod
    def quantile(cls, k: int) -> "RatioVector":
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        return cls(tuple(j / k for j in range(1, k)))

    @classmethod
    def from_widths(cls, widths: Sequence[float]) -> "RatioVector":
        return cls(tuple(np.cumsum(widths)[:-1]))

    @property
    def k(self) -> int:
        return len(self.ratios) + 1

    @property
    def widths(self) -> np.ndarray:
        """Delta r_j for j = 1..k; positive and summing to 1."""
        return np.diff(np.concatenate([[0.0], self.ratios, [1.0]]))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.ratios, dtype=float)

    def __len__(self) -> int:
        return len(self.ratios)


def _values(entities: Sequence[Entity]) -> np.ndarray:
    values = np.array([e.value for e in entities if e.value is not None], dtype=float)
    if values.size == 0:
        raise ValueError("at least one valued entity is required")
    return values


def candidate_midpoints(entities: Sequence[Entity]) -> List[float]:
    """Midpoints between consecutive distinct sorted values (empty when fewer than two distinct values)."""
    values = [e.value for e in entities if e.value is not None]
    distinct = np.unique(np.asarray(values, dtype=float))
    if distinct.size < 2:
        return []
    return [float(x) for x in (distinct[:-1] + distinct[1:]) / 2.0]


def cut_count(ratio: float, n_values: int) -> int:
    """Number of smallest values placed below the cut for ratio r: floor(r * n)."""
    return int(math.floor(ratio * n_values + 1e-9))


def _order_stats(values: np.ndarray, positions: Sequence[int]) -> np.ndarray:
    """Values at the given 0-based sorted positions."""
    if values.size > SELECTION_THRESHOLD:
        return np.partition(values, list(positions))[list(positions)]
    return np.sort(values)[list(positions)]


def _separator_for_cut(values: np.ndarray, c: int) -> Optional[float]:
    """Midpoint separator after the c smallest values; duplicate runs snap to the nearer run boundary."""
    n = values.size
    if c <= 0 or c >= n:
        return None
    below, above = _order_stats(values, [c - 1, c])
    if below < above:
        return float((below + above) / 2.0)

    v = below
    lo = int(np.count_nonzero(values < v))
    hi = int(np.count_nonzero(values <= v))
    lo_ok, hi_ok = lo > 0, hi < n
    if lo_ok and (not hi_ok or c - lo < hi - c):
        return float((values[values < v].max() + v) / 2.0)
    if hi_ok:
        return float((v + values[values > v].min()) / 2.0)
    return None


def ratio_to_separators(entities: Sequence[Entity], ratios: RatioVector) -> SeparatorSet:
    """
    Convert a ratio vector into separating values for one result list.

    The cut for r_j falls after the floor(r_j * |E|)-th smallest value and the
    separator is the midpoint to the next value. Duplicate values are never
    split; cuts that collapse onto each other reduce the range count.
    """
    values = _values(entities)
    separators = []
    for r in ratios.ratios:
        s = _separator_for_cut(values, cut_count(r, values.size))
        if s is not None and (not separators or s > separators[-1]):
            separators.append(s)
    result = SeparatorSet(tuple(separators), ratios.k)
    if result.truncated:
        logger.debug("Ratio conversion collapsed to %d of %d ranges", result.effective_k, result.k)
    return result


def _balanced_partition(values: np.ndarray, k: int) -> Tuple[float, ...]:
    """Most balanced partition over distinct-value boundaries (min sum of squared size deviations)."""
    distinct, counts = np.unique(values, return_counts=True)
    d = distinct.size
    ranges = min(k, d)
    target = values.size / ranges
    prefix = np.concatenate([[0], np.cumsum(counts)])

    # best[j][a]: cost of splitting groups a..d-1 into j ranges
    best = np.full((ranges + 1, d + 1), np.inf)
    choice = np.zeros((ranges + 1, d + 1), dtype=int)
    best[0][d] = 0.0
    for j in range(1, ranges + 1):
        for a in range(d - 1, -1, -1):
            for b in range(a + 1, d + 1):
                if not np.isfinite(best[j - 1][b]):
                    continue
                cost = (prefix[b] - prefix[a] - target) ** 2 + best[j - 1][b]
                if cost < best[j][a] - 1e-12:
                    best[j][a] = cost
                    choice[j][a] = b

    separators = []
    a = 0
    for j in range(ranges, 1, -1):
        b = choice[j][a]
        separators.append(float((distinct[b - 1] + distinct[b]) / 2.0))
        a = b
    return tuple(separators)


def quantile_partition(entities: Sequence[Entity], k: int) -> SeparatorSet:
    """
    Equi-depth baseline: ranges of (as nearly as duplicates allow) equal size.

    On duplicate-free input this is ratio_to_separators with (1/k, ..., (k-1)/k).
    When k exceeds the number of distinct values the maximum feasible number of
    ranges is returned and ``truncated`` is set.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    values = _values(entities)
    if k == 1:
        return SeparatorSet((), 1)

    result = ratio_to_separators(entities, RatioVector.quantile(k))
    feasible = min(k, np.unique(values).size)
    if result.effective_k < feasible:
        result = SeparatorSet(_balanced_partition(values, k), k)
    if result.truncated:
        logger.warning("Quantile partition: %d ranges requested but only %d distinct values",
                       k, np.unique(values).size)
    return result


def _round_half_away(x: float, precision: float) -> float:
    q = x / precision
    n = math.copysign(math.floor(abs(q) + 0.5), q)
    digits = max(0, -Decimal(repr(precision)).normalize().as_tuple().exponent)
    return round(n * precision, digits)


def round_separators(separators: SeparatorSet, precision: float) -> SeparatorSet:
    """Round each separator to the nearest multiple of precision (half away from zero), collapsing duplicates."""
    if precision <= 0:
        raise ValueError(f"precision must be positive, got {precision}")
    rounded = []
    for s in separators.separators:
        r = _round_half_away(s, precision)
        if not rounded or r > rounded[-1]:
            rounded.append(r)
    return SeparatorSet(tuple(rounded), separators.k)
