import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnprune.errors import DimensionError, FormatError, InvalidInputError, InvalidStateError
from attnprune.stats import AttentionStats, load_stats, merge, save_stats


def softmax_rows(rng, n, c, scale=3.0):
    z = rng.normal(scale=scale, size=(n, c))
    e = np.exp(z - z.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


def test_means_match_fsum_oracle():
    rng = np.random.default_rng(0)
    st_ = AttentionStats({"a": 5})
    rows = []
    for _ in range(40):
        s = softmax_rows(rng, 37, 5)
        rows.append(s)
        st_.accumulate("a", s)
    allrows = np.concatenate(rows)
    oracle = np.array([math.fsum(allrows[:, c]) for c in range(5)]) / len(allrows)
    np.testing.assert_allclose(st_.finalize()["a"], oracle, rtol=0, atol=1e-15)


def test_normalization_large_stream():
    rng = np.random.default_rng(1)
    st_ = AttentionStats({"a": 64, "b": 3})
    for _ in range(200):
        st_.accumulate("a", softmax_rows(rng, 50, 64))
        st_.accumulate("b", softmax_rows(rng, 50, 3))
    for a in st_.finalize().values():
        assert abs(a.sum() - 1.0) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 9))
def test_merge_order_invariance(seed, shards, c):
    rng = np.random.default_rng(seed)
    batches = [softmax_rows(rng, int(rng.integers(1, 20)), c) for _ in range(shards * 2)]
    full = AttentionStats({"l": c})
    for b in batches:
        full.accumulate("l", b)
    parts = []
    for i in range(0, len(batches), 2):
        p = AttentionStats({"l": c})
        for b in batches[i : i + 2]:
            p.accumulate("l", b)
        parts.append(p)
    fwd = parts[0]
    for p in parts[1:]:
        fwd = merge(fwd, p)
    rev = parts[-1]
    for p in reversed(parts[:-1]):
        rev = merge(p, rev)
    assert fwd.sample_count == full.sample_count
    np.testing.assert_allclose(fwd.means()["l"], full.means()["l"], atol=1e-14)
    np.testing.assert_allclose(rev.means()["l"], full.means()["l"], atol=1e-14)


def test_merge_with_empty_is_exact():
    rng = np.random.default_rng(2)
    a = AttentionStats({"l": 4})
    a.accumulate("l", softmax_rows(rng, 9, 4))
    np.testing.assert_array_equal(merge(a, AttentionStats({"l": 4})).means()["l"], a.means()["l"])


def test_per_class_tables():
    st_ = AttentionStats({"l": 2}, num_classes=3)
    st_.accumulate("l", np.array([[0.2, 0.8], [0.6, 0.4], [0.5, 0.5]]), labels=[0, 0, 2])
    pc = st_.per_class()["l"]
    np.testing.assert_allclose(pc[0], [0.4, 0.6])
    np.testing.assert_array_equal(pc[1], [0, 0])
    np.testing.assert_allclose(pc[2], [0.5, 0.5])
    np.testing.assert_array_equal(st_.class_counts()["l"], [2, 0, 1])


def test_errors():
    st_ = AttentionStats({"l": 3})
    with pytest.raises(DimensionError):
        st_.accumulate("l", np.ones((2, 4)) / 4)
    with pytest.raises(InvalidInputError):
        st_.accumulate("x", np.ones((2, 3)) / 3)
    with pytest.raises(InvalidStateError):
        st_.finalize()
    st_.accumulate("l", np.ones((2, 3)) / 3)
    st_.finalize()
    with pytest.raises(InvalidStateError):
        st_.accumulate("l", np.ones((2, 3)) / 3)
    with pytest.raises(InvalidInputError):
        merge(AttentionStats({"l": 3}), AttentionStats({"l": 4}))


def test_uneven_counts_rejected():
    st_ = AttentionStats({"a": 2, "b": 2})
    st_.accumulate("a", np.full((3, 2), 0.5))
    with pytest.raises(InvalidStateError):
        st_.sample_count


def test_json_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    st_ = AttentionStats({"a": 3, "b": 5}, num_classes=2)
    st_.accumulate("a", softmax_rows(rng, 6, 3), labels=[0, 1, 0, 1, 1, 1])
    st_.accumulate("b", softmax_rows(rng, 6, 5), labels=[0, 1, 0, 1, 1, 1])
    path = tmp_path / "stats.json"
    save_stats(st_, path, alpha=0.06)
    crit, doc = load_stats(path)
    assert doc["sample_count"] == 6 and doc["alpha"] == 0.06
    for k, v in st_.means().items():
        np.testing.assert_array_equal(crit[k], v)
    first = path.read_bytes()
    save_stats(st_, path, alpha=0.06)
    assert path.read_bytes() == first


def test_bad_stats_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"layers": [{"id": "a", "channels": 3, "a": [0.5, 0.5]}]}')
    with pytest.raises(FormatError):
        load_stats(p)
    p.write_text("not json")
    with pytest.raises(FormatError):
        load_stats(p)
