import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copydetect import core, matcher
from copydetect.core import Descriptor
from copydetect.matcher import MatchConfig, Prediction


def _refs(mat, ids=None):
    ids = range(len(mat)) if ids is None else ids
    return [Descriptor(int(i), v) for i, v in zip(ids, mat)]


def test_search_example():
    index = matcher.build_index(_refs([[1.0, 0.0], [0.0, 1.0]]))
    out = matcher.search(index, Descriptor(99, [0.9, 0.1]), MatchConfig(k=1, eps=-1))
    assert out[0][0] == 0
    assert out[0][1] == pytest.approx(0.9 / math.hypot(0.9, 0.1))


def test_eps_and_ties():
    index = matcher.build_index(_refs([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]], ids=[7, 3, 5]))
    out = matcher.search(index, Descriptor(1, [1.0, 0.0]), MatchConfig(k=3, eps=0.5))
    # equal scores come out by ascending id; the orthogonal reference is below eps
    assert [i for i, _ in out] == [3, 7]


def test_filter_rule():
    index = matcher.build_index(_refs([[1.0, 0.0]]))
    cfg = MatchConfig()
    cand = [(0, 1.0)]
    assert matcher.ratio_filter(Descriptor(1, [1.0, 0.0]), cand, index, cfg) == cand  # R = 1
    assert matcher.ratio_filter(Descriptor(1, [1.05, 0.0]), cand, index, cfg) == cand  # R = tau + delta
    assert matcher.ratio_filter(Descriptor(1, [1.06, 0.0]), cand, index, cfg) == []
    assert matcher.ratio_filter(Descriptor(1, [0.2, 0.0]), cand, index, cfg) == cand
    literal = MatchConfig(delta=0.0)
    assert matcher.ratio_filter(Descriptor(1, [1.01, 0.0]), cand, index, literal) == []
    off = MatchConfig(filter_enabled=False)
    assert matcher.ratio_filter(Descriptor(1, [50.0, 0.0]), cand, index, off) == cand


def test_match_all_counts():
    r = np.random.default_rng(0)
    index = matcher.build_index(_refs(np.abs(r.standard_normal((6, 4))) + 0.1))
    queries = _refs(np.abs(r.standard_normal((3, 4))) + 0.1, ids=[100, 101, 102])
    preds = matcher.match_all(queries, index, MatchConfig(k=2, eps=-1, filter_enabled=False))
    assert len(preds) == 6
    assert [p.query for p in preds] == [100, 100, 101, 101, 102, 102]


def test_index_errors():
    with pytest.raises(matcher.ZeroNormDescriptor) as e:
        matcher.build_index(_refs([[1.0, 0.0], [0.0, 0.0]]))
    assert e.value.image_id == 1
    with pytest.raises(matcher.DuplicateId):
        matcher.build_index(_refs([[1.0, 0.0], [0.0, 1.0]], ids=[4, 4]))
    with pytest.raises(core.DimensionMismatch):
        matcher.build_index([Descriptor(0, [1.0]), Descriptor(1, [1.0, 2.0])])
    with pytest.raises(ValueError):
        matcher.build_index([])


def test_bad_queries_are_reported_not_fatal():
    index = matcher.build_index(_refs([[1.0, 0.0]]))
    errors = []
    preds = matcher.match_all([Descriptor(1, [0.0, 0.0]), Descriptor(2, [1.0, 0.0]), Descriptor(3, [1.0])],
                              index, MatchConfig(), errors)
    assert [p.query for p in preds] == [2]
    assert [q for q, _ in errors] == [1, 3]


def test_index_is_read_only():
    index = matcher.build_index(_refs([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        index.matrix[0, 0] = 5.0


def test_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(k=0)
    with pytest.raises(ValueError):
        MatchConfig(tau=0)
    with pytest.raises(ValueError):
        MatchConfig(delta=-0.1)


def test_l2_metric():
    index = matcher.build_index(_refs([[1.0, 0.0], [3.0, 0.0]]))
    out = matcher.search(index, Descriptor(9, [2.9, 0.0]), MatchConfig(k=2, metric="l2", l2_max_distance=1.0))
    assert [i for i, _ in out] == [1]


def test_predictions_round_trip(tmp_path):
    preds = [Prediction(1, 2, 0.123456789), Prediction(3, 4, -0.5)]
    path = tmp_path / "p.csv"
    matcher.write_predictions(path, preds)
    assert path.read_text().splitlines()[0] == "query_id,ref_id,score"
    assert matcher.read_predictions(path) == preds


@pytest.mark.parametrize("body,line", [
    ("query_id,ref_id,score\n1,2\n", 2),
    ("query_id,ref_id,score\n1,2,0.5\nx,2,0.5\n", 3),
    ("query_id,ref_id,score\n1,2,nan\n", 2),
    ("q,r,s\n", 1),
])
def test_predictions_parse_errors(tmp_path, body, line):
    path = tmp_path / "p.csv"
    path.write_text(body)
    with pytest.raises(matcher.PredictionsParseError) as e:
        matcher.read_predictions(path)
    assert e.value.line == line


# -- exactness and filter properties --------------------------------------------------

def brute_force_top_k(refs, q, k, eps):
    scored = [(d.id, core.cosine_similarity(q, d)) for d in refs]
    scored = [s for s in scored if s[1] >= eps]
    scored.sort(key=lambda s: (-s[1], s[0]))
    return scored[:k]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 300), st.integers(1, 12))
def test_search_matches_full_scan(seed, n, k):
    r = np.random.default_rng(seed)
    refs = _refs(r.standard_normal((n, 6)), ids=r.permutation(10 * n)[:n])
    index = matcher.build_index(refs)
    q = Descriptor(0, r.standard_normal(6))
    got = matcher.search(index, q, MatchConfig(k=k, eps=-0.2))
    want = brute_force_top_k(refs, q, k, -0.2)
    assert [i for i, _ in got] == [i for i, _ in want]
    assert np.allclose([s for _, s in got], [s for _, s in want], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_filter_only_removes(seed):
    r = np.random.default_rng(seed)
    index = matcher.build_index(_refs(r.standard_normal((30, 5)) * r.uniform(0.5, 2, (30, 1))))
    queries = _refs(r.standard_normal((8, 5)) * r.uniform(0.5, 2, (8, 1)), ids=range(100, 108))
    off = matcher.match_all(queries, index, MatchConfig(filter_enabled=False, eps=0.0))
    on = matcher.match_all(queries, index, MatchConfig(filter_enabled=True, eps=0.0))
    assert set(on) <= set(off)
    # kept predictions keep their relative order
    assert [p for p in off if p in set(on)] == on
    for p in set(off) - set(on):
        assert core.norm(queries[p.query - 100]) / index.norm_of(p.reference) > 1.05
