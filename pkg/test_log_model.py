#!/usr/bin/env python3
"""
Tests for log ingestion, serialization, time splits and the synthetic generator
"""

import json
import sys

import numpy as np
import pytest

sys.path.append('src')

from numeric_facet_partition.errors import ConfigError, EmptyLogError, LogFormatError, LogValidationError
from numeric_facet_partition.log_model import (
    Impression,
    SearchLog,
    clicked_value,
    parse_log,
    serialize_log,
    split_by_time,
    valued_entities,
)
from numeric_facet_partition.ratio_opt import cache_cdf, compute_z
from numeric_facet_partition.synthetic import (
    EntityCountSpec,
    QueryCluster,
    SynthConfig,
    ValueCdfSpec,
    generate_synthetic,
    load_synth_config,
)


def record(query_id, ts, values, clicked=0, features=None):
    entities = []
    for j, v in enumerate(values):
        entity = {"id": f"{query_id}-{j}", "rank": j + 1}
        if v is not None:
            entity["value"] = v
        entities.append(entity)
    rec = {"query_id": query_id, "ts": ts, "entities": entities,
           "clicked": f"{query_id}-{clicked}" if clicked is not None else None}
    if features is not None:
        rec["features"] = features
    return rec


def write_lines(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write((rec if isinstance(rec, str) else json.dumps(rec)) + "\n")


def test_parse_drops_clickless_lines(tmp_path):
    path = tmp_path / "log.jsonl"
    write_lines(path, [
        record("a", 1, [100, 200, 300], clicked=1),
        record("b", 2, [100, 200], clicked=None),
        record("c", 3, [5, 6], clicked=0),
        record("d", 4, [7, 8, 9], clicked=2),
    ])

    log = parse_log(path)

    assert log.stats.n == 3
    assert log.dropped.no_click == 1
    assert log.dropped.total == 1
    assert [imp.query_id for imp in log] == ["a", "c", "d"]


def test_parse_drops_click_on_valueless_entity(tmp_path):
    path = tmp_path / "log.jsonl"
    write_lines(path, [record("a", 1, [None, 200], clicked=0), record("b", 2, [1, 2], clicked=1)])

    log = parse_log(path)

    assert len(log) == 1
    assert log.dropped.clicked_missing_value == 1


def test_duplicate_ranks_name_the_query(tmp_path):
    rec = record("dup-q", 1, [100, 200], clicked=0)
    rec["entities"][1]["rank"] = 1
    path = tmp_path / "log.jsonl"
    write_lines(path, [record("ok", 0, [1, 2]), rec])

    with pytest.raises(LogValidationError) as excinfo:
        parse_log(path)

    assert excinfo.value.query_id == "dup-q"
    assert excinfo.value.line_number == 2
    assert "dup-q" in str(excinfo.value)


def test_clicked_must_be_retrieved(tmp_path):
    rec = record("q", 1, [100, 200], clicked=0)
    rec["clicked"] = "elsewhere"
    path = tmp_path / "log.jsonl"
    write_lines(path, [rec])

    with pytest.raises(LogValidationError):
        parse_log(path)


def test_malformed_line_carries_line_number(tmp_path):
    path = tmp_path / "log.jsonl"
    write_lines(path, [record("a", 1, [1, 2]), "{not json"])

    with pytest.raises(LogFormatError) as excinfo:
        parse_log(path)

    assert excinfo.value.line_number == 2


def test_empty_file_is_an_error(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")

    with pytest.raises(EmptyLogError, match="no impressions"):
        parse_log(path)


def test_non_finite_value_rejected():
    with pytest.raises(ValueError):
        Impression.model_validate(record("q", 1, [float("inf"), 2.0], clicked=1))


def test_round_trip(tmp_path):
    log = generate_synthetic(SynthConfig(n_queries=30, entities_per_query=EntityCountSpec(low=2, high=8),
                                         missing_value_rate=0.2, n_noise_features=2, seed=4))
    first = tmp_path / "first.jsonl"
    second = tmp_path / "second.jsonl"

    serialize_log(log, first)
    parsed = parse_log(first)
    serialize_log(parsed, second)

    assert parsed.impressions == log.impressions
    assert first.read_bytes() == second.read_bytes()
    assert '"ts"' in first.read_text().splitlines()[0]


def test_valued_entities_skip_missing_values():
    imp = Impression.model_validate(record("q", 1, [300, None, 100], clicked=2))

    assert [e.value for e in valued_entities(imp)] == [300, 100]
    assert clicked_value(imp) == 100


def test_stats_use_valued_entities():
    imps = [Impression.model_validate(record("a", 1, [1, None, 3])),
            Impression.model_validate(record("b", 2, [1, 2, 3, 4]))]

    log = SearchLog.from_impressions(imps)

    assert log.stats.n == 2
    assert log.stats.m == pytest.approx(3.0)
    # sizes 2 and 4 share the ratio 1/2
    assert log.stats.n0 == 3


def test_stats_n0_matches_cached_cdf():
    log = generate_synthetic(SynthConfig(n_queries=80, seed=3, entities_per_query=EntityCountSpec(low=2, high=12)))

    assert log.stats.n0 == cache_cdf(log).n0


def make_log(timestamps):
    return SearchLog.from_impressions(
        Impression.model_validate(record(f"q{i}", ts, [1, 2])) for i, ts in enumerate(timestamps))


def test_split_by_time_seventy_thirty():
    log = make_log([9, 3, 7, 1, 5, 2, 8, 0, 6, 4])

    train, test = split_by_time(log, 0.7)

    assert (len(train), len(test)) == (7, 3)
    assert [imp.timestamp for imp in train] == [0, 1, 2, 3, 4, 5, 6]
    assert [imp.timestamp for imp in test] == [7, 8, 9]


def test_split_fraction_landing_on_an_integer():
    # 0.07 * 100 is 7.000000000000001 in floating point
    train, test = split_by_time(make_log(range(100)), 0.07)

    assert (len(train), len(test)) == (7, 93)


def test_split_single_impression_warns(caplog):
    train, test = split_by_time(make_log([5]), 0.7)

    assert (len(train), len(test)) == (1, 0)
    assert "empty side" in caplog.text


def test_split_ties_keep_input_order():
    log = make_log([1, 1, 1, 1])

    train, test = split_by_time(log, 0.5)

    assert [imp.query_id for imp in train] == ["q0", "q1"]
    assert [imp.query_id for imp in test] == ["q2", "q3"]


def test_split_is_a_partition():
    log = generate_synthetic(SynthConfig(n_queries=50, seed=1))
    train, test = split_by_time(log, 0.3)

    ids = [imp.query_id for imp in train] + [imp.query_id for imp in test]
    assert sorted(ids) == sorted(imp.query_id for imp in log)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.2, 1.5])
def test_split_fraction_out_of_range(fraction):
    with pytest.raises(ValueError):
        split_by_time(make_log([1, 2]), fraction)


def test_generator_is_deterministic(tmp_path):
    config = SynthConfig(n_queries=40, seed=11, click_position_bias=1.0)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"

    serialize_log(generate_synthetic(config), a)
    serialize_log(generate_synthetic(config), b)

    assert a.read_bytes() == b.read_bytes()


def empirical(log, r):
    z = np.array([compute_z(imp) for imp in log])
    return float(np.mean(z <= r))


def test_generator_linear_cdf():
    log = generate_synthetic(SynthConfig(n_queries=10_000, entities_per_query=EntityCountSpec(fixed=20), seed=3))

    for r in np.arange(1, 10) / 10:
        assert abs(empirical(log, r) - r) <= 0.03


def test_generator_concave_cdf():
    log = generate_synthetic(SynthConfig(n_queries=10_000, entities_per_query=EntityCountSpec(fixed=20),
                                         value_cdf=ValueCdfSpec(kind="concave"), seed=5))

    assert 0.72 <= empirical(log, 0.5) <= 0.78


def test_generator_clusters_carry_features():
    config = SynthConfig(
        n_queries=200, seed=2, n_noise_features=1,
        clusters=[QueryCluster(weight=1, feature_center=[0.0, 0.0]),
                  QueryCluster(weight=1, value_cdf=ValueCdfSpec(kind="concave"), feature_center=[1.0, 0.0])],
    )

    log = generate_synthetic(config)

    assert config.n_features == 3
    assert all(len(imp.features) == 3 for imp in log)


def test_piecewise_cdf_validation():
    ValueCdfSpec(kind="piecewise", table=[(0.0, 0.0), (0.5, 0.8), (1.0, 1.0)])
    with pytest.raises(ValueError):
        ValueCdfSpec(kind="piecewise", table=[(0.0, 0.0), (0.5, 0.9), (0.6, 0.8), (1.0, 1.0)])


def test_synth_config_errors_become_config_errors(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("n_queries: -3\n")

    with pytest.raises(ConfigError):
        load_synth_config(path)


def test_packaged_synth_defaults_load():
    config = load_synth_config(n_queries=12)

    assert config.n_queries == 12
    assert config.entities_per_query.fixed == 50


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
