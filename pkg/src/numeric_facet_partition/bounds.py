#!/usr/bin/env python3
"""
Monte-Carlo Checks of the Surrogate Concentration Bounds

Draws clicked quantiles from a known CDF, compares the empirical surrogate
C_n(R) to the true C(R), and checks the exceedance rate of sup |C_n - C|
against the stated exponential bounds. Also checks width monotonicity of the
optimal ratio vector under a concave CDF.
"""

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from numeric_facet_partition.synthetic import ValueCdfSpec

logger = logging.getLogger(__name__)

CONCAVITY_DELTA = 1e-6
DEFAULT_GRID_RESOLUTION = 200
_INEQUALITY_SLACK = 1e-12


@dataclass
class BoundReport:
    """Exceedance of sup |C_n - C| > epsilon over Monte-Carlo trials versus a theoretical bound."""
    theorem: str
    n: int
    k: int
    epsilon: float
    trials: int
    observed_exceedance_rate: float
    theoretical_bound: float
    passed: bool
    applicable: bool = True
    inequality_violations: int = 0
    sup_deviations: List[float] = field(default_factory=list)
    note: str = "sup over R is evaluated on a finite grid plus local refinement, so it is a lower bound on the true sup"
    extras: Dict[str, float] = field(default_factory=dict)

    @property
    def mc_slack(self) -> float:
        b = min(max(self.theoretical_bound, 0.0), 1.0)
        return 3.0 * math.sqrt(b * (1.0 - b) / self.trials)

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("sup_deviations")
        data["mc_slack"] = self.mc_slack
        data["max_sup_deviation"] = max(self.sup_deviations) if self.sup_deviations else None
        return data

    def write(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def to_csv(self, path: Union[str, Path]) -> None:
        pd.DataFrame({"trial": range(len(self.sup_deviations)), "sup_deviation": self.sup_deviations}).to_csv(
            path, index=False)


@dataclass
class WidthReport:
    """Optimal ratio vector of the true surrogate on a grid and its width monotonicity."""
    k: int
    grid_resolution: int
    ratios: Tuple[float, ...]
    widths: Tuple[float, ...]
    value: float
    applicable: bool
    strongly_concave: bool
    passed: Optional[bool]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Property1Report:
    n_pairs: int
    length: int
    violations: int

    @property
    def passed(self) -> bool:
        return self.violations == 0


def theorem1_bound(n: int, k: int, epsilon: float) -> float:
    return min(1.0, 2.0 * math.exp(-2.0 * n * epsilon ** 2 / (k - 1) ** 2))


def theorem3_bound(n: int, epsilon: float) -> float:
    return min(1.0, 2.0 * math.exp(-2.0 * n * epsilon ** 2))


def _grid(resolution: int) -> np.ndarray:
    return np.arange(resolution + 1) / resolution


def _empirical_on(z_sorted: np.ndarray, r: np.ndarray) -> np.ndarray:
    """F_n(r) = #{z < r} / n, pinned to 0 at r = 0 and 1 at r = 1."""
    out = np.searchsorted(z_sorted, r, side="left") / z_sorted.size
    out = np.where(r <= 0.0, 0.0, out)
    return np.where(r >= 1.0, 1.0, out)


def _surrogate(r: np.ndarray, f_inner: np.ndarray) -> float:
    edges = np.concatenate([[0.0], r, [1.0]])
    f = np.concatenate([[0.0], f_inner, [1.0]])
    return float(np.dot(np.diff(edges), np.diff(f)))


def _segment_matrix(x: np.ndarray, f: np.ndarray) -> np.ndarray:
    """D[a, b] = (x_b - x_a) * (f_b - f_a); only a < b is meaningful."""
    return (x[None, :] - x[:, None]) * (f[None, :] - f[:, None])


def _best_path(segments: np.ndarray, k: int, maximise: bool) -> Tuple[float, List[int]]:
    """
    Extreme sum of k consecutive segments from grid point 0 to the last grid
    point, with strictly increasing interior points.
    """
    size = segments.shape[0]
    fill = -np.inf if maximise else np.inf
    pick = np.argmax if maximise else np.argmin
    lower = np.tril(np.ones((size, size), dtype=bool))

    best = np.full(size, fill)
    best[0] = 0.0
    back = []
    for _ in range(k):
        total = best[:, None] + segments
        total[lower] = fill
        arg = pick(total, axis=0)
        best = total[arg, np.arange(size)]
        back.append(arg)

    points = [size - 1]
    for arg in reversed(back):
        points.append(int(arg[points[-1]]))
    points.reverse()
    return float(best[-1]), points[1:-1]


def _sample_z(cdf: ValueCdfSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(cdf.ppf(rng.random(n)))


def _deviation(r: np.ndarray, z_sorted: np.ndarray, cdf: ValueCdfSpec) -> Tuple[float, float]:
    """(|C_n(R) - C(R)|, sum_j |F_n(r_j) - F(r_j)|) at one ratio vector."""
    fn = _empirical_on(z_sorted, r)
    f = cdf.cdf(r)
    return abs(_surrogate(r, fn) - _surrogate(r, f)), float(np.abs(fn - f).sum())


def _refine(r0: np.ndarray, z_sorted: np.ndarray, cdf: ValueCdfSpec) -> Tuple[float, np.ndarray]:
    """Local Nelder-Mead push of |C_n - C| away from a grid point; infeasible points score 0."""
    def negative(r):
        r = np.asarray(r, dtype=float)
        if r[0] <= 0.0 or r[-1] >= 1.0 or np.any(np.diff(r) <= 0):
            return 0.0
        return -_deviation(r, z_sorted, cdf)[0]

    result = minimize(negative, r0, method="Nelder-Mead", options={"maxfev": 200, "xatol": 1e-4, "fatol": 1e-9})
    return -float(result.fun), np.asarray(result.x, dtype=float)


def check_theorem1(true_cdf: ValueCdfSpec, n: int, k: int, epsilon: float, trials: int, seed: int = 0,
                   grid_resolution: int = DEFAULT_GRID_RESOLUTION, refine: bool = True,
                   random_checks: int = 5) -> BoundReport:
    """
    Exceedance rate of sup_R |C_n(R) - C(R)| > epsilon versus 2 exp(-2 n eps^2 / (k-1)^2).

    Per trial the sup is exact over grid-valued R (max and min path over the
    additive segment form of C_n - C), then refined locally.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")

    x = _grid(grid_resolution)
    f_true = true_cdf.cdf(x)
    exceed, violations = 0, 0
    sups = []
    for t, child in enumerate(np.random.SeedSequence(seed).spawn(trials)):
        rng = np.random.default_rng(child)
        z_sorted = _sample_z(true_cdf, n, rng)
        diff = _segment_matrix(x, _empirical_on(z_sorted, x)) - _segment_matrix(x, f_true)
        high, high_pts = _best_path(diff, k, maximise=True)
        low, low_pts = _best_path(diff, k, maximise=False)
        sup = max(high, -low)
        best_pts = high_pts if high >= -low else low_pts

        checked = [x[high_pts], x[low_pts]] + [np.cumsum(rng.dirichlet(np.ones(k)))[:-1] for _ in range(random_checks)]
        if refine:
            refined, r_refined = _refine(x[best_pts], z_sorted, true_cdf)
            sup = max(sup, refined)
            checked.append(r_refined)
        for r in checked:
            if r[0] <= 0.0 or r[-1] >= 1.0 or np.any(np.diff(r) <= 0):
                continue
            gap, total = _deviation(r, z_sorted, true_cdf)
            violations += gap > total + _INEQUALITY_SLACK

        sups.append(sup)
        exceed += sup > epsilon
        logger.debug("Trial %d: sup |C_n - C| = %.6f", t, sup)

    bound = theorem1_bound(n, k, epsilon)
    report = BoundReport(theorem="theorem1", n=n, k=k, epsilon=epsilon, trials=trials,
                         observed_exceedance_rate=exceed / trials, theoretical_bound=bound, passed=False,
                         inequality_violations=int(violations), sup_deviations=sups)
    report.passed = report.observed_exceedance_rate <= bound + report.mc_slack
    logger.info("Theorem 1 check (n=%d, k=%d, eps=%.3f): observed %.4f vs bound %.4g -> %s",
                n, k, epsilon, report.observed_exceedance_rate, bound, "pass" if report.passed else "FAIL")
    return report


def concavity(cdf: ValueCdfSpec, grid_resolution: int) -> Tuple[bool, bool]:
    """(concave, strongly concave) from second differences on the grid."""
    second = np.diff(cdf.cdf(_grid(grid_resolution)), n=2)
    return bool(second.max() <= CONCAVITY_DELTA), bool(second.max() < -CONCAVITY_DELTA)


def optimal_grid_ratios(cdf: ValueCdfSpec, k: int, grid_resolution: int) -> Tuple[np.ndarray, float]:
    """argmin of the true C(R) over grid-valued R (exact, by dynamic programming)."""
    x = _grid(grid_resolution)
    value, points = _best_path(_segment_matrix(x, cdf.cdf(x)), k, maximise=False)
    return x[points], value


def _monotone(widths: np.ndarray, grid_resolution: int) -> bool:
    return bool(np.all(np.diff(widths) >= -1.0 / grid_resolution - 1e-12))


def check_theorem2(cdf: ValueCdfSpec, k: int, grid_resolution: int = DEFAULT_GRID_RESOLUTION) -> WidthReport:
    """
    Widths of the optimal ratio vector under a concave CDF are non-decreasing
    (within one grid step). A CDF that is not concave on the grid is reported
    as inapplicable rather than failed.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    concave, strong = concavity(cdf, grid_resolution)
    ratios, value = optimal_grid_ratios(cdf, k, grid_resolution)
    widths = np.diff(np.concatenate([[0.0], ratios, [1.0]]))
    passed = _monotone(widths, grid_resolution) if concave else None
    report = WidthReport(k=k, grid_resolution=grid_resolution, ratios=tuple(float(r) for r in ratios),
                         widths=tuple(float(w) for w in widths), value=value, applicable=concave,
                         strongly_concave=strong, passed=passed)
    if not concave:
        logger.warning("Theorem 2 check: CDF %s is not concave on the grid; reported as inapplicable", cdf.kind)
    return report


def _neighbourhood(center: np.ndarray, radius: float, grid_resolution: int) -> np.ndarray:
    """Grid-valued ratio vectors within L-inf distance radius of center."""
    steps = int(math.floor(radius * grid_resolution + 1e-9))
    idx = np.round(center * grid_resolution).astype(int)
    axes = [range(max(1, i - steps), min(grid_resolution - 1, i + steps) + 1) for i in idx]
    points = [p for p in itertools.product(*axes) if all(b > a for a, b in zip(p, p[1:]))]
    return np.array(points, dtype=float).reshape(-1, len(idx)) / grid_resolution


def check_theorem3(cdf: ValueCdfSpec, n: int, epsilon: float, trials: int, neighborhood_radius: float,
                   seed: int = 0, k: int = 2, grid_resolution: int = DEFAULT_GRID_RESOLUTION) -> BoundReport:
    """
    Exceedance rate of sup |C_n - C| > epsilon over grid points near the optimum
    R*, versus the k-free bound 2 exp(-2 n eps^2).

    Inapplicable when the CDF is not strongly concave or some neighbourhood
    point has decreasing widths.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    _, strong = concavity(cdf, grid_resolution)
    center, _ = optimal_grid_ratios(cdf, k, grid_resolution)
    region = _neighbourhood(center, neighborhood_radius, grid_resolution)
    widths = np.diff(np.hstack([np.zeros((len(region), 1)), region, np.ones((len(region), 1))]), axis=1)
    applicable = strong and all(_monotone(w, grid_resolution) for w in widths)
    if not applicable:
        logger.warning("Theorem 3 check: preconditions do not hold within radius %.4f", neighborhood_radius)

    f_region = cdf.cdf(region)
    true_values = np.array([_surrogate(r, f) for r, f in zip(region, f_region)])
    exceed, violations = 0, 0
    sups = []
    for child in np.random.SeedSequence(seed).spawn(trials):
        z_sorted = _sample_z(cdf, n, np.random.default_rng(child))
        fn_region = _empirical_on(z_sorted, region)
        empirical = np.array([_surrogate(r, f) for r, f in zip(region, fn_region)])
        gaps = np.abs(empirical - true_values)
        violations += int(np.count_nonzero(gaps > np.abs(fn_region - f_region).sum(axis=1) + _INEQUALITY_SLACK))
        sup = float(gaps.max())
        sups.append(sup)
        exceed += sup > epsilon

    bound = theorem3_bound(n, epsilon)
    report = BoundReport(theorem="theorem3", n=n, k=k, epsilon=epsilon, trials=trials,
                         observed_exceedance_rate=exceed / trials, theoretical_bound=bound, passed=False,
                         applicable=applicable, inequality_violations=violations, sup_deviations=sups,
                         note="sup over grid points within the neighbourhood of R*",
                         extras={"neighborhood_radius": neighborhood_radius, "region_size": float(len(region))})
    report.passed = report.observed_exceedance_rate <= bound + report.mc_slack
    logger.info("Theorem 3 check (n=%d, k=%d, eps=%.3f, radius=%.3f): observed %.4f vs bound %.4g -> %s",
                n, k, epsilon, neighborhood_radius, report.observed_exceedance_rate, bound,
                "pass" if report.passed else "FAIL")
    return report


def check_property1(n_pairs: int = 10_000, length: int = 10, seed: int = 0) -> Property1Report:
    """|sum x_l y_l| <= sum |x_l| * max |y_l| on random vector pairs."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_pairs, length))
    y = rng.normal(size=(n_pairs, length))
    lhs = np.abs((x * y).sum(axis=1))
    rhs = np.abs(x).sum(axis=1) * np.abs(y).max(axis=1)
    return Property1Report(n_pairs=n_pairs, length=length, violations=int(np.count_nonzero(lhs > rhs + 1e-12)))
