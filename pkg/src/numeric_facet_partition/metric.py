#!/usr/bin/env python3
"""
Refined Rank and ARR Evaluation

The offline evaluation contract: a partition splits the valued entities of an
impression into half-open ranges [s_{j-1}, s_j) with s_0 = -inf and
s_k = +inf; the refined rank is the position of the first-clicked entity among
the valued entities of its range, in original rank order. ARR is the mean
refined rank over a log (lower is better).
"""

import bisect
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from numeric_facet_partition.errors import MissingValueError
from numeric_facet_partition.log_model import Impression, SearchLog


@dataclass(frozen=True)
class SeparatorSet:
    """
    Strictly increasing separating values for an intended k ranges.

    Fewer than k-1 separators may be emitted when duplicate values make k
    ranges infeasible; ``truncated`` flags that case.
    """
    separators: Tuple[float, ...]
    k: int

    def __post_init__(self):
        object.__setattr__(self, "separators", tuple(float(s) for s in self.separators))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if len(self.separators) > self.k - 1:
            raise ValueError(f"{len(self.separators)} separators exceed k-1 = {self.k - 1}")
        if any(not math.isfinite(s) for s in self.separators):
            raise ValueError("separators must be finite")
        if any(b <= a for a, b in zip(self.separators, self.separators[1:])):
            raise ValueError(f"separators must be strictly increasing: {self.separators}")

    @classmethod
    def single_range(cls) -> "SeparatorSet":
        return cls((), 1)

    @property
    def effective_k(self) -> int:
        return len(self.separators) + 1

    @property
    def truncated(self) -> bool:
        return self.effective_k < self.k

    def range_index(self, value: float) -> int:
        """0-based index of the range [s_{j-1}, s_j) containing value."""
        return bisect.bisect_right(self.separators, value)

    def __len__(self) -> int:
        return len(self.separators)


def refined_rank(impression: Impression, separators: SeparatorSet) -> int:
    """
    Rank of the clicked entity inside its range.

    Counts the valued entities that share the clicked entity's range and are
    ranked at or above it. Entities without a value are invisible.
    """
    clicked = impression.clicked_entity
    if clicked.value is None:
        raise MissingValueError(f"query_id={impression.query_id!r}: clicked entity has no facet value")

    target = separators.range_index(clicked.value)
    return sum(
        1
        for e in impression.entities
        if e.value is not None and e.rank <= clicked.rank and separators.range_index(e.value) == target
    )


Partitioner = Callable[[Impression], SeparatorSet]


@dataclass
class EvalReport:
    """ARR of one partitioner over a log, with the per-impression refined ranks."""
    arr: float
    per_impression_rr: List[Tuple[str, int]]
    n: int
    method: str = ""
    k: Optional[int] = None
    extras: Dict[str, float] = field(default_factory=dict)

    @property
    def rr_values(self) -> np.ndarray:
        return np.array([rr for _, rr in self.per_impression_rr], dtype=float)

    @property
    def query_ids(self) -> List[str]:
        return [qid for qid, _ in self.per_impression_rr]

    def summary(self) -> Dict:
        rr = self.rr_values
        return {
            "method": self.method,
            "k": self.k,
            "n": self.n,
            "arr": self.arr,
            "rr_std": float(rr.std(ddof=1)) if self.n > 1 else 0.0,
            **self.extras,
        }

    def to_csv(self, path: Union[str, Path]) -> None:
        frame = pd.DataFrame(self.per_impression_rr, columns=["query_id", "rr"])
        frame.to_csv(path, index=False)

    def write_summary(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")


def arr_evaluate(log: SearchLog, partitioner: Partitioner, method: str = "", k: Optional[int] = None) -> EvalReport:
    """
    Evaluate a per-impression partitioner by ARR.

    Summation follows impression order, so the result is reproducible.
    """
    per_impression = []
    for impression in log.impressions:
        try:
            rr = refined_rank(impression, partitioner(impression))
        except MissingValueError as e:
            raise MissingValueError(f"while evaluating query_id={impression.query_id!r}: {e}") from e
        per_impression.append((impression.query_id, rr))

    n = len(per_impression)
    arr = math.fsum(rr for _, rr in per_impression) / n if n else float("nan")
    return EvalReport(arr=arr, per_impression_rr=per_impression, n=n, method=method, k=k)
