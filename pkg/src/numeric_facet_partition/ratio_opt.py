#!/usr/bin/env python3
"""
Global Ratio Optimisation

Clicked-quantile statistics, the cached empirical CDF, the surrogate C_n(R)
and its minimisation with derivative-free optimisers, plus the exhaustive
grid-search oracle and a vectorised exact ARR evaluator for ratio partitions.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, PositiveInt
from scipy.optimize import minimize

from numeric_facet_partition.errors import EmptyLogError, InfeasibleError, MissingValueError
from numeric_facet_partition.log_model import Impression, SearchLog, valued_entities
from numeric_facet_partition.metric import Partitioner, SeparatorSet
from numeric_facet_partition.partition_core import RatioVector, cut_count, ratio_to_separators

logger = logging.getLogger(__name__)

DEFAULT_GRID_CAP = 2_000_000
_GRID_CHUNK = 50_000
_LOGIT_CLIP = 10.0

SCIPY_METHODS = {
    "powell": "Powell",
    "nelder_mead": "Nelder-Mead",
    "cg": "CG",
    "bfgs": "BFGS",
    "slsqp": "SLSQP",
}


def compute_z(impression: Impression) -> float:
    """Share of valued entities whose value is at most the clicked value."""
    clicked = impression.clicked_entity
    if clicked.value is None:
        raise MissingValueError(f"query_id={impression.query_id!r}: clicked entity has no facet value")
    values = [e.value for e in valued_entities(impression)]
    return sum(1 for v in values if v <= clicked.value) / len(values)


class LookupCounter:
    """Counts comparisons made by CDF lookups."""

    def __init__(self):
        self.comparisons = 0
        self.lookups = 0

    def reset(self) -> None:
        self.comparisons = 0
        self.lookups = 0


@dataclass(frozen=True)
class EmpiricalCdf:
    """
    Cached F_n(r) = #{z < r} / n.

    y[i] holds F_n(x_sorted[i]); ``tail`` is F_n just below 1. Every z < 1 is
    itself a cached ratio, so F_n(r) equals y at the smallest cached ratio
    at or above r.
    """
    x_sorted: np.ndarray
    y: np.ndarray
    n: int
    z_sorted: np.ndarray
    tail: float

    @classmethod
    def from_z(cls, z: Sequence[float], candidates: Optional[Sequence[float]] = None) -> "EmpiricalCdf":
        z_sorted = np.sort(np.asarray(z, dtype=float))
        if z_sorted.size == 0:
            raise EmptyLogError("cannot build a CDF from zero clicked quantiles")
        points = z_sorted[z_sorted < 1.0]
        if candidates is not None:
            points = np.concatenate([np.asarray(candidates, dtype=float), points])
        x_sorted = np.unique(points[(points > 0.0) & (points < 1.0)])
        y = np.searchsorted(z_sorted, x_sorted, side="left") / z_sorted.size
        tail = np.count_nonzero(z_sorted < 1.0) / z_sorted.size
        return cls(x_sorted=x_sorted, y=y, n=int(z_sorted.size), z_sorted=z_sorted, tail=float(tail))

    @property
    def n0(self) -> int:
        return int(self.x_sorted.size)

    def values(self, r) -> np.ndarray:
        """Vectorised F_n with F_n(r) = 0 for r <= 0 and 1 for r >= 1."""
        r = np.asarray(r, dtype=float)
        idx = np.searchsorted(self.x_sorted, r, side="left")
        padded = np.append(self.y, self.tail)
        out = padded[np.minimum(idx, self.x_sorted.size)]
        out = np.where(r <= 0.0, 0.0, out)
        return np.where(r >= 1.0, 1.0, out)

    def recount(self, r: float, counter: Optional[LookupCounter] = None) -> float:
        """Uncached F_n(r): scans every z."""
        if counter is not None:
            counter.lookups += 1
            counter.comparisons += self.n
        return float(np.count_nonzero(self.z_sorted < r)) / self.n


def cache_cdf(train: SearchLog) -> EmpiricalCdf:
    """
    Build the cached empirical CDF of clicked quantiles.

    Candidate ratios are j/m for every distinct valued-entity count m in the
    log and j = 1..m-1.
    """
    if len(train) == 0:
        raise EmptyLogError("cannot cache a CDF from an empty log")
    sizes = [len(valued_entities(imp)) for imp in train.impressions]
    z = np.array([compute_z(imp) for imp in train.impressions])
    cdf = EmpiricalCdf.from_z(z, candidate_ratios(sizes))
    logger.info("Cached CDF: n=%d, %d distinct result sizes, n0=%d", cdf.n, len(set(sizes)), cdf.n0)
    return cdf


def candidate_ratios(sizes: Sequence[int]) -> np.ndarray:
    """All j/m for j = 1..m-1 over the distinct result sizes m."""
    distinct = sorted(set(int(m) for m in sizes))
    if not distinct:
        return np.empty(0)
    return np.concatenate([np.arange(1, m) / m for m in distinct])


def cdf_lookup(cdf: EmpiricalCdf, r: float, counter: Optional[LookupCounter] = None) -> float:
    """F_n(r) by binary search over the cached ratios."""
    if r <= 0.0:
        return 0.0
    if r >= 1.0:
        return 1.0

    lo, hi = 0, cdf.x_sorted.size
    comparisons = 0
    while lo < hi:
        mid = (lo + hi) // 2
        comparisons += 1
        if cdf.x_sorted[mid] < r:
            lo = mid + 1
        else:
            hi = mid
    if counter is not None:
        counter.lookups += 1
        counter.comparisons += comparisons
    return float(cdf.y[lo]) if lo < cdf.x_sorted.size else cdf.tail


def _as_array(ratios: Union[RatioVector, Sequence[float]]) -> np.ndarray:
    if isinstance(ratios, RatioVector):
        return ratios.as_array()
    return np.asarray(ratios, dtype=float)


def surrogate_cn(cdf: EmpiricalCdf, ratios: Union[RatioVector, Sequence[float]],
                 counter: Optional[LookupCounter] = None) -> float:
    """C_n(R) = sum_j dr_j * (F_n(r_j) - F_n(r_{j-1})) with F_n(0) = 0 and F_n(1) = 1."""
    r = _as_array(ratios)
    if counter is not None:
        inner = np.array([cdf_lookup(cdf, x, counter) for x in r])
    else:
        inner = cdf.values(r)
    edges = np.concatenate([[0.0], r, [1.0]])
    f = np.concatenate([[0.0], inner, [1.0]])
    return float(np.dot(np.diff(edges), np.diff(f)))


def surrogate_per_query(z: Sequence[float], ratios: Union[RatioVector, Sequence[float]]) -> np.ndarray:
    """Per-impression C^i(R): width of the range [r_{j-1}, r_j) holding z (z = 1 falls in the last range)."""
    r = _as_array(ratios)
    widths = np.diff(np.concatenate([[0.0], r, [1.0]]))
    return widths[np.searchsorted(r, np.asarray(z, dtype=float), side="right")]


def containing_range_fraction(impression: Impression, ratios: RatioVector) -> float:
    """Share of the impression's valued entities lying in the clicked entity's range."""
    entities = valued_entities(impression)
    separators = ratio_to_separators(entities, ratios)
    target = separators.range_index(impression.clicked_entity.value)
    return sum(1 for e in entities if separators.range_index(e.value) == target) / len(entities)


def ratio_partitioner(ratios: RatioVector) -> Partitioner:
    """Per-impression partitioner applying one ratio vector to every query."""
    def partition(impression: Impression) -> SeparatorSet:
        return ratio_to_separators(valued_entities(impression), ratios)
    return partition


class OptimizerSettings(BaseModel):
    """Settings for minimising the surrogate."""

    method: Literal["powell", "nelder_mead", "cg", "bfgs", "slsqp"] = Field("powell", description="Optimiser")
    restarts: PositiveInt = Field(10, description="Number of starting points (first is the quantile vector)")
    tol: float = Field(1e-6, gt=0, description="Convergence tolerance passed to the optimiser")
    seed: int = Field(0, description="Seed of the random restart points")
    max_eval: PositiveInt = Field(2000, description="Function-evaluation cap per restart")


@dataclass
class RatioFit:
    """Outcome of a surrogate minimisation."""
    ratios: RatioVector
    value: float
    n_eval: int
    method: str = ""
    restart_values: List[float] = field(default_factory=list)


def _to_ratios(u: np.ndarray) -> np.ndarray:
    """Ordered-simplex map: w = (0, u), widths = softmax(w), R = cumsum(widths) without the final 1."""
    w = np.concatenate([[0.0], np.clip(u, -_LOGIT_CLIP, _LOGIT_CLIP)])
    w = np.exp(w - w.max())
    widths = w / w.sum()
    return np.cumsum(widths)[:-1]


def _from_widths(widths: np.ndarray) -> np.ndarray:
    logs = np.log(np.maximum(widths, 1e-300))
    return np.clip(logs[1:] - logs[0], -_LOGIT_CLIP, _LOGIT_CLIP)


class _TrackedObjective:
    """Surrogate over the unconstrained parameters, remembering the best point evaluated."""

    def __init__(self, cdf: EmpiricalCdf):
        self.cdf = cdf
        self.n_eval = 0
        self.best_value = math.inf
        self.best_u: Optional[np.ndarray] = None

    def __call__(self, u: np.ndarray) -> float:
        self.n_eval += 1
        value = surrogate_cn(self.cdf, _to_ratios(np.asarray(u, dtype=float)))
        if value < self.best_value:
            self.best_value = value
            self.best_u = np.array(u, dtype=float)
        return value


def _starting_points(k: int, settings: OptimizerSettings) -> List[np.ndarray]:
    """Quantile start, then Dirichlet draws; a longer run's starts extend a shorter run's."""
    rng = np.random.default_rng(settings.seed)
    starts = [np.zeros(k - 1)]
    for _ in range(settings.restarts - 1):
        starts.append(_from_widths(rng.dirichlet(np.ones(k))))
    return starts


def _strictly_increasing(r: np.ndarray) -> bool:
    return bool(np.all(np.diff(r) > 0) and r[0] > 0.0 and r[-1] < 1.0)


def optimize_ratio(cdf: EmpiricalCdf, k: int, settings: Optional[OptimizerSettings] = None) -> RatioFit:
    """
    Minimise C_n(R) over ratio vectors with k - 1 entries.

    Each restart runs scipy.optimize.minimize on the softmax parameterisation;
    the best point evaluated across restarts is returned (ties keep the
    earlier restart).
    """
    settings = settings or OptimizerSettings()
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k == 1:
        return RatioFit(RatioVector(()), 1.0, 0, settings.method, [1.0])

    best_value, best_r = math.inf, None
    total_eval = 0
    restart_values = []
    for restart, x0 in enumerate(_starting_points(k, settings)):
        objective = _TrackedObjective(cdf)
        objective(x0)
        options = {"maxiter": settings.max_eval}
        if settings.method in ("powell", "nelder_mead"):
            options["maxfev"] = settings.max_eval
        if settings.method == "nelder_mead":
            # scipy's default simplex around a zero start is too small for a step-shaped objective
            options["initial_simplex"] = np.vstack([x0, x0 + 0.5 * np.eye(k - 1)])
        minimize(objective, x0, method=SCIPY_METHODS[settings.method], tol=settings.tol, options=options)

        r = _to_ratios(objective.best_u)
        total_eval += objective.n_eval
        restart_values.append(objective.best_value)
        logger.debug("Restart %d (%s): C_n=%.6f after %d evaluations",
                     restart, settings.method, objective.best_value, objective.n_eval)
        if objective.best_value < best_value and _strictly_increasing(r):
            best_value, best_r = objective.best_value, r

    if best_r is None:
        best_r = RatioVector.quantile(k).as_array()
        best_value = surrogate_cn(cdf, best_r)

    logger.info("Optimised ratios with %s, k=%d: C_n=%.6f (%d evaluations over %d restarts)",
                settings.method, k, best_value, total_eval, settings.restarts)
    return RatioFit(RatioVector(tuple(best_r)), best_value, total_eval, settings.method, restart_values)


class RatioArrEvaluator:
    """
    Vectorised ARR of ratio partitions over a fixed log.

    Impressions are grouped by valued-entity count m; within a group the cut
    positions of a ratio vector are shared, and duplicate runs are snapped to
    the nearer run boundary exactly as ratio_to_separators does, so the
    result equals arr_evaluate with ratio_partitioner.
    """

    def __init__(self, log: SearchLog):
        if len(log) == 0:
            raise EmptyLogError("cannot evaluate ARR on an empty log")
        groups: Dict[int, List[int]] = {}
        for i, impression in enumerate(log.impressions):
            groups.setdefault(len(valued_entities(impression)), []).append(i)

        self.n = len(log)
        self.groups = []
        for m, indices in sorted(groups.items()):
            values = np.empty((len(indices), m))
            ranks = np.empty((len(indices), m), dtype=np.int64)
            click_pos = np.empty(len(indices), dtype=np.int64)
            click_rank = np.empty(len(indices), dtype=np.int64)
            for row, i in enumerate(indices):
                impression = log.impressions[i]
                entities = sorted(valued_entities(impression), key=lambda e: (e.value, e.rank))
                values[row] = [e.value for e in entities]
                ranks[row] = [e.rank for e in entities]
                click_pos[row] = next(p for p, e in enumerate(entities) if e.id == impression.clicked)
                click_rank[row] = impression.clicked_entity.rank
            run_start, run_end = _run_bounds(values)
            self.groups.append((m, values, ranks, click_pos, click_rank, run_start, run_end))

    def arr(self, ratios: Union[RatioVector, Sequence[float]]) -> float:
        ratios = _as_array(ratios)
        total = 0
        for m, values, ranks, click_pos, click_rank, run_start, run_end in self.groups:
            g = len(values)
            if m == 1 or ratios.size == 0:
                lower = np.zeros(g, dtype=np.int64)
                upper = np.full(g, m, dtype=np.int64)
            else:
                bounds = np.stack(
                    [self._snap(cut_count(r, m), m, values, run_start, run_end) for r in ratios], axis=1)
                # a zero bound means "no cut" and never narrows the range
                lower = np.where(bounds <= click_pos[:, None], bounds, 0).max(axis=1)
                upper = np.where(bounds > click_pos[:, None], bounds, m).min(axis=1)
            pos = np.arange(m)
            inside = (pos >= lower[:, None]) & (pos < upper[:, None]) & (ranks <= click_rank[:, None])
            total += int(inside.sum())
        return total / self.n

    @staticmethod
    def _snap(c: int, m: int, values, run_start, run_end) -> np.ndarray:
        g = len(values)
        if c <= 0 or c >= m:
            return np.zeros(g, dtype=np.int64)
        inside_run = values[:, c - 1] == values[:, c]
        lo = run_start[:, c]
        hi = run_end[:, c]
        pick_lo = ((c - lo < hi - c) & (lo > 0)) | (hi >= m)
        snapped = np.where(pick_lo, lo, hi)
        snapped = np.where((snapped <= 0) | (snapped >= m), 0, snapped)
        return np.where(inside_run, snapped, c).astype(np.int64)


def _run_bounds(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per position, first index and one-past-last index of its run of equal values (rows sorted)."""
    g, m = values.shape
    run_start = np.zeros((g, m), dtype=np.int64)
    run_end = np.full((g, m), m, dtype=np.int64)
    for p in range(1, m):
        same = values[:, p] == values[:, p - 1]
        run_start[:, p] = np.where(same, run_start[:, p - 1], p)
    for p in range(m - 2, -1, -1):
        same = values[:, p] == values[:, p + 1]
        run_end[:, p] = np.where(same, run_end[:, p + 1], p + 1)
    return run_start, run_end


def fast_ratio_arr(log: SearchLog, ratios: Union[RatioVector, Sequence[float]]) -> float:
    """ARR of a single ratio vector; equals arr_evaluate(log, ratio_partitioner(ratios)).arr."""
    return RatioArrEvaluator(log).arr(ratios)


@dataclass
class GridResult:
    """Grid-search optimum."""
    ratios: RatioVector
    value: float
    n_evaluated: int
    objective: str


def _surrogate_batch(cdf: EmpiricalCdf, combos: np.ndarray) -> np.ndarray:
    """C_n for a batch of index combinations into x_sorted."""
    r = cdf.x_sorted[combos]
    f = cdf.y[combos]
    g = len(combos)
    edges = np.hstack([np.zeros((g, 1)), r, np.ones((g, 1))])
    fs = np.hstack([np.zeros((g, 1)), f, np.ones((g, 1))])
    return (np.diff(edges, axis=1) * np.diff(fs, axis=1)).sum(axis=1)


def grid_search(source: Union[EmpiricalCdf, SearchLog], k: int, objective: str = "surrogate",
                eval_log: Optional[SearchLog] = None, cap: int = DEFAULT_GRID_CAP) -> GridResult:
    """
    Exhaustive search over ratio vectors drawn from the cached candidate ratios.

    objective "surrogate" minimises C_n; "true_arr" minimises the exact ARR on
    eval_log (defaulting to the source log). Only k <= 4 is tractable.
    Ties keep the lexicographically smallest vector.
    """
    if objective not in ("surrogate", "true_arr"):
        raise ValueError(f"unknown grid objective {objective!r}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > 4:
        raise InfeasibleError(f"grid search is intractable for k={k} (k > 4)")

    if isinstance(source, SearchLog):
        cdf = cache_cdf(source)
        eval_log = eval_log or source
    else:
        cdf = source
    if objective == "true_arr" and eval_log is None:
        raise ValueError("true_arr grid search needs a log to evaluate on")

    total = math.comb(cdf.n0, k - 1)
    if total > cap:
        raise InfeasibleError(f"grid search would evaluate {total} ratio vectors (cap {cap})")
    if k == 1 or total == 0:
        value = 1.0 if objective == "surrogate" else fast_ratio_arr(eval_log, ())
        return GridResult(RatioVector(()), value, 1, objective)

    evaluator = RatioArrEvaluator(eval_log) if objective == "true_arr" else None
    best_value, best_combo = math.inf, None
    combos_iter = itertools.combinations(range(cdf.n0), k - 1)
    while True:
        chunk = list(itertools.islice(combos_iter, _GRID_CHUNK))
        if not chunk:
            break
        combos = np.array(chunk, dtype=np.int64)
        if evaluator is None:
            values = _surrogate_batch(cdf, combos)
        else:
            values = np.array([evaluator.arr(cdf.x_sorted[c]) for c in combos])
        i = int(np.argmin(values))
        if values[i] < best_value:
            best_value, best_combo = float(values[i]), combos[i]

    ratios = RatioVector(tuple(cdf.x_sorted[best_combo]))
    logger.info("Grid search (%s, k=%d) over %d vectors: best %.6f at %s",
                objective, k, total, best_value, ratios.ratios)
    return GridResult(ratios, best_value, total, objective)


def default_curve_grid() -> np.ndarray:
    return np.arange(1, 100) / 100.0


def cdf_curve(cdf: EmpiricalCdf, grid: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """(r, F_n(r)) points."""
    r = np.asarray(grid if grid is not None else default_curve_grid(), dtype=float)
    return pd.DataFrame({"r": r, "F_n": cdf.values(r)})


def surrogate_curve(cdf: EmpiricalCdf, grid: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """(r_1, C_n(r_1)) points for two ranges."""
    r = np.asarray(grid if grid is not None else default_curve_grid(), dtype=float)
    return pd.DataFrame({"r_1": r, "C_n": [surrogate_cn(cdf, [x]) for x in r]})
