#!/usr/bin/env python3
"""
Search Log Data Model

Entities, impressions and search logs; ingestion of the line-delimited log
format with validation and drop accounting, serialization, and the
timestamp-ordered train/test split.
"""

import json
import logging
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from numeric_facet_partition.errors import ConfigError, EmptyLogError, LogFormatError, LogValidationError, MissingValueError

logger = logging.getLogger(__name__)


class Entity(BaseModel):
    """One retrieved entity: an id, an optional numeric facet value and its 1-based rank."""

    model_config = ConfigDict(frozen=True)

    id: str = Field(..., description="Opaque entity identifier")
    value: Optional[float] = Field(None, description="Numeric facet value (e.g. price); absent means missing facet")
    rank: int = Field(..., ge=1, description="1-based position in the retrieved list")

    @field_validator("value")
    @classmethod
    def _finite_value(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not math.isfinite(value):
            raise ValueError("facet value must be finite")
        return value

    @property
    def has_value(self) -> bool:
        return self.value is not None


class Impression(BaseModel):
    """One logged query event with its ranked entities and the first-clicked entity."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    query_id: str = Field(..., description="Opaque query identifier")
    timestamp: int = Field(..., alias="ts", description="Integer epoch of the query")
    entities: Tuple[Entity, ...] = Field(..., min_length=1, description="Retrieved entities")
    clicked: str = Field(..., description="Id of the first-clicked entity")
    features: Optional[Tuple[float, ...]] = Field(None, description="Optional query feature vector")

    @model_validator(mode="after")
    def _check_invariants(self) -> "Impression":
        ranks = sorted(e.rank for e in self.entities)
        if ranks != list(range(1, len(self.entities) + 1)):
            raise ValueError(f"ranks must be a permutation of 1..{len(self.entities)} (duplicate or missing rank)")
        ids = [e.id for e in self.entities]
        if len(set(ids)) != len(ids):
            raise ValueError("entity ids must be unique within an impression")
        matches = [e for e in self.entities if e.id == self.clicked]
        if not matches:
            raise ValueError(f"clicked entity {self.clicked!r} is not among the retrieved entities")
        if not matches[0].has_value:
            raise ValueError(f"clicked entity {self.clicked!r} has no facet value")
        return self

    @property
    def clicked_entity(self) -> Entity:
        return next(e for e in self.entities if e.id == self.clicked)

    def to_record(self) -> dict:
        """Dictionary in the external log schema (``ts`` key, absent values omitted)."""
        return self.model_dump(by_alias=True, exclude_none=True)


def valued_entities(impression: Impression) -> List[Entity]:
    """Entities with a present facet value, ordered by original rank."""
    return sorted((e for e in impression.entities if e.has_value), key=lambda e: e.rank)


def clicked_value(impression: Impression) -> float:
    value = impression.clicked_entity.value
    if value is None:
        raise MissingValueError(f"query_id={impression.query_id!r}: clicked entity has no facet value")
    return value


@dataclass(frozen=True)
class LogStats:
    """Size statistics of a log: n impressions, mean valued-entity count m, unique candidate ratios n0."""
    n: int
    m: float
    n0: int = 0

    @classmethod
    def from_impressions(cls, impressions: Iterable[Impression]) -> "LogStats":
        sizes = [len(valued_entities(imp)) for imp in impressions]
        if not sizes:
            return cls(n=0, m=0.0)
        # distinct j/m, so 1/2 and 2/4 count once
        ratios = {Fraction(j, m) for m in set(sizes) for j in range(1, m)}
        return cls(n=len(sizes), m=sum(sizes) / len(sizes), n0=len(ratios))


@dataclass(frozen=True)
class DropCounts:
    """Impressions discarded during ingestion, by reason."""
    no_click: int = 0
    clicked_missing_value: int = 0

    @property
    def total(self) -> int:
        return self.no_click + self.clicked_missing_value


@dataclass(frozen=True)
class SearchLog:
    """Validated click log. Only impressions with a valued click are retained."""
    impressions: Tuple[Impression, ...]
    stats: LogStats
    dropped: DropCounts = field(default_factory=DropCounts)

    @classmethod
    def from_impressions(cls, impressions: Iterable[Impression], dropped: Optional[DropCounts] = None) -> "SearchLog":
        impressions = tuple(impressions)
        return cls(
            impressions=impressions,
            stats=LogStats.from_impressions(impressions),
            dropped=dropped or DropCounts(),
        )

    def __len__(self) -> int:
        return len(self.impressions)

    def __iter__(self):
        return iter(self.impressions)

    def subset(self, indices: Iterable[int]) -> "SearchLog":
        return SearchLog.from_impressions(self.impressions[i] for i in indices)


def _decode_line(raw: dict, line_number: int, dropped: dict) -> Optional[Impression]:
    if not isinstance(raw, dict):
        raise LogFormatError("record is not an object", line_number)
    query_id = raw.get("query_id")

    clicked = raw.get("clicked")
    if clicked in (None, ""):
        dropped["no_click"] += 1
        return None

    entities = raw.get("entities")
    if isinstance(entities, list):
        target = next((e for e in entities if isinstance(e, dict) and e.get("id") == clicked), None)
        if target is not None and target.get("value") is None:
            dropped["clicked_missing_value"] += 1
            return None

    try:
        return Impression.model_validate(raw)
    except ValidationError as e:
        details = "; ".join(err["msg"] for err in e.errors())
        raise LogValidationError(details, query_id=query_id, line_number=line_number) from e


def parse_log(path: Union[str, Path]) -> SearchLog:
    """
    Read and validate a line-delimited JSON log.

    Impressions without a click, or whose clicked entity has no value, are
    dropped and counted in ``SearchLog.dropped``.

    Args:
        path: Log file, one JSON record per line

    Returns:
        Validated SearchLog

    Raises:
        LogFormatError: a line is not valid JSON (carries the line number)
        LogValidationError: a record violates an impression invariant
        EmptyLogError: no impressions survive
    """
    impressions = []
    dropped = {"no_click": 0, "clicked_missing_value": 0}

    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise LogFormatError(f"malformed record ({e.msg})", line_number) from e
            impression = _decode_line(raw, line_number, dropped)
            if impression is not None:
                impressions.append(impression)

    counts = DropCounts(**dropped)
    if counts.total:
        logger.warning(
            "Dropped %d impressions from %s (%d without click, %d with valueless click)",
            counts.total, path, counts.no_click, counts.clicked_missing_value,
        )
    if not impressions:
        raise EmptyLogError(f"no impressions in {path}")

    return SearchLog.from_impressions(impressions, dropped=counts)


def serialize_log(log: SearchLog, path: Union[str, Path]) -> None:
    """Write a log in the line-delimited format read by parse_log."""
    with open(path, "w", encoding="utf-8") as f:
        for impression in log.impressions:
            f.write(json.dumps(impression.to_record(), separators=(",", ":")))
            f.write("\n")


def split_by_time(log: SearchLog, train_fraction: float) -> Tuple[SearchLog, SearchLog]:
    """
    Split a log into an earlier training part and a later testing part.

    The first ceil(train_fraction * n) impressions by timestamp go to training;
    timestamp ties keep input order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")

    ordered = sorted(log.impressions, key=lambda imp: imp.timestamp)
    cut = math.ceil(train_fraction * len(ordered) - 1e-9)
    train, test = ordered[:cut], ordered[cut:]

    if not train or not test:
        logger.warning("Time split of %d impressions at %.2f leaves an empty side (%d/%d)",
                       len(ordered), train_fraction, len(train), len(test))

    return SearchLog.from_impressions(train), SearchLog.from_impressions(test)
