import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mextract.errors import InconsistentConfidence, NoOverlap, SchemaViolation
from mextract.retro import (
    LongitudinalRecord,
    diff_report,
    expand_binary_sentiment,
    impute_full_simplex,
    ingest_snapshot,
    snapshot_diff,
    write_snapshot,
)
from oracles import maxent_brute


def rec(i, year, cls, conf):
    return LongitudinalRecord(str(i), year, cls, conf)


def test_impute_examples():
    p = impute_full_simplex(3, 0.4, 7)
    assert p[3] == 0.4
    assert np.delete(p, 3) == pytest.approx([0.1] * 6)
    assert impute_full_simplex(0, 1.0, 3) == pytest.approx([1, 0, 0])
    with pytest.raises(InconsistentConfidence):
        impute_full_simplex(1, 0.2, 4)


def test_impute_at_exactly_uniform():
    assert impute_full_simplex(2, 1 / 3, 3) == pytest.approx([1 / 3] * 3)


@pytest.mark.parametrize("m", range(2, 9))
def test_impute_matches_numerical_max_entropy(m):
    rng = np.random.default_rng(m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(20):
            c = rng.uniform(1 / m, 1)
            cls = int(rng.integers(m))
            assert np.abs(impute_full_simplex(cls, c, m) - maxent_brute(cls, c, m, rng)).max() < 1e-6


@given(st.integers(2, 10).flatmap(lambda m: st.tuples(st.just(m), st.integers(0, m - 1), st.floats(1 / m, 1.0))))
def test_imputed_vector_is_simplex_with_reported_top(args):
    m, cls, c = args
    p = impute_full_simplex(cls, c, m)
    assert abs(p.sum() - 1) < 1e-9
    assert p[cls] == c and p.max() == p[cls]


@given(st.integers(0, 1), st.floats(0.5, 1.0))
def test_binary_sentiment_expansion(label, conf):
    p = expand_binary_sentiment(label, conf, 3)
    assert abs(p.sum() - 1) < 1e-9
    assert p[label] == p.max() and p[label] == conf


def test_snapshot_diff_examples():
    a = [rec(1, "2020", 0, 0.9), rec(2, "2020", 1, 0.7)]
    d = snapshot_diff(a, [rec(1, "2024", 0, 0.9), rec(2, "2024", 1, 0.7)])
    assert (d.overlap, d.mean_abs_conf_delta) == (1.0, 0.0)
    d = snapshot_diff(a, [rec(1, "2024", 0, 0.9), rec(2, "2024", 2, 0.7)])
    assert d.overlap == 0.5
    d = snapshot_diff([rec(1, "2020", 0, 0.5)], [rec(1, "2024", 0, 0.4)])
    assert d.mean_abs_conf_delta == pytest.approx(0.1)
    with pytest.raises(NoOverlap):
        snapshot_diff([rec(1, "2020", 0, 0.5)], [rec(2, "2024", 0, 0.5)])


def test_snapshot_diff_only_uses_intersection():
    d = snapshot_diff([rec(1, "a", 0, 0.9), rec(2, "a", 0, 0.9)], [rec(1, "b", 0, 0.8)])
    assert d.n_intersection == 1 and d.n_a == 2 and d.coverage == 0.5
    doc = json.loads(diff_report(d, fidelity_delta=-0.02))
    assert doc["predicted_class_overlap"] == 1.0 and doc["fidelity_delta"] == -0.02


def write(path, rows):
    path.write_text("# mextract-snapshot v1\ninput_id,year,class,confidence\n" + "".join(r + "\n" for r in rows))
    return path


def test_ingest_well_formed(tmp_path):
    recs = ingest_snapshot(write(tmp_path / "s.csv", ["a,2020,0,0.9", "b,2020,1,0.6", "c,2020,2,0.5"]))
    assert len(recs) == 3 and recs[1] == rec("b", "2020", 1, 0.6)


def test_ingest_rejects_bad_confidence_with_line(tmp_path):
    with pytest.raises(SchemaViolation) as e:
        ingest_snapshot(write(tmp_path / "s.csv", ["a,2020,0,0.9", "b,2020,1,1.3"]))
    assert e.value.line == 4


def test_ingest_rejects_duplicate_key(tmp_path):
    with pytest.raises(SchemaViolation) as e:
        ingest_snapshot(write(tmp_path / "s.csv", ["a,2020,0,0.9", "a,2020,1,0.6"]))
    assert e.value.line == 4


@pytest.mark.parametrize("text", ["", "input_id,year,class,confidence\n", "# mextract-snapshot v1\nid,year\n"])
def test_ingest_rejects_bad_headers(tmp_path, text):
    (tmp_path / "s.csv").write_text(text)
    with pytest.raises(SchemaViolation):
        ingest_snapshot(tmp_path / "s.csv")


def test_ingest_class_range(tmp_path):
    path = write(tmp_path / "s.csv", ["a,2020,3,0.9"])
    assert len(ingest_snapshot(path)) == 1
    with pytest.raises(SchemaViolation):
        ingest_snapshot(path, num_classes=3)


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 4), st.floats(0.2, 1.0)), max_size=30,
                unique_by=lambda t: t[0]))
def test_write_then_ingest_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("snap") / "s.csv"
    recs = [rec(i, "2021", c, conf) for i, c, conf in rows]
    write_snapshot(path, recs)
    assert ingest_snapshot(path) == recs
    write_snapshot(path, ingest_snapshot(path))
    assert ingest_snapshot(path) == recs
