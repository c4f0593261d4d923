import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copydetect import evaluator as ev
from copydetect.core import Descriptor
from copydetect.matcher import MatchConfig, Prediction, build_index, match_all


def oracle_ap(preds, gt):
    """Area under the stepwise precision/recall curve, by cumulative sums."""
    gt = set(gt)
    order = sorted(preds, key=lambda p: (-p.score, p.query, p.reference))
    hit = np.array([(p.query, p.reference) in gt for p in order], dtype=float)
    if not len(hit):
        return 0.0
    precision = np.cumsum(hit) / np.arange(1, len(hit) + 1)
    recall = np.cumsum(hit) / len(gt)
    d_recall = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(precision * d_recall))


def P(q, r, s):
    return Prediction(q, r, s)


def test_hand_example():
    preds = [P(1, 10, 0.9), P(2, 11, 0.8), P(3, 12, 0.7)]
    gt = [(1, 10), (3, 12)]
    assert ev.micro_ap(preds, gt) == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)
    assert ev.micro_ap(preds, gt) == pytest.approx(0.833333, abs=1e-6)


def test_trivial_cases():
    gt = [(1, 10), (2, 20)]
    assert ev.micro_ap([P(1, 10, 0.9), P(2, 20, 0.8), P(3, 5, 0.1)], gt) == 1.0
    assert ev.micro_ap([P(1, 11, 0.9)], gt) == 0.0
    assert ev.micro_ap([], gt) == 0.0
    with pytest.raises(ev.EmptyGroundTruth):
        ev.micro_ap([P(1, 10, 0.9)], [])


def test_duplicates_rejected():
    with pytest.raises(ev.DuplicatePrediction):
        ev.micro_ap([P(1, 10, 0.9), P(1, 10, 0.5)], [(1, 10)])


def test_tie_order():
    # equal scores: query id, then reference id decide
    preds = [P(2, 1, 0.5), P(1, 9, 0.5), P(1, 3, 0.5)]
    assert [(p.query, p.reference) for p in ev.ranked(preds)] == [(1, 3), (1, 9), (2, 1)]
    assert ev.micro_ap(preds, [(1, 9)]) == pytest.approx(0.5)


def test_precision_from_table_counts():
    assert 100 * ev.precision_from_counts(2269, 2740) == pytest.approx(45.30, abs=0.005)
    assert 100 * ev.precision_from_counts(2331, 567) == pytest.approx(80.43, abs=0.005)


def _counted_predictions(tp, fp):
    preds = [P(k, k, 1.0 - k * 1e-6) for k in range(tp)]
    preds += [P(tp + k, 10**6 + k, 0.5 - k * 1e-7) for k in range(fp)]
    return preds, [(k, k) for k in range(tp)]


def test_precision_at_n_full_list():
    preds, gt = _counted_predictions(2269, 2740)
    r = ev.precision_at_n(preds, gt, 5009)
    assert (r.tp, r.fp, r.short_list) == (2269, 2740, False)
    assert 100 * r.precision == pytest.approx(45.30, abs=0.005)


def test_precision_at_n_short_list():
    preds, gt = _counted_predictions(2331, 567)
    r = ev.precision_at_n(preds, gt, 5009)
    assert (r.tp, r.fp, r.short_list) == (2331, 567, True)
    assert 100 * r.precision == pytest.approx(80.43, abs=0.005)


def test_precision_at_n_all_correct():
    preds = [P(k, k, 1.0 / (k + 1)) for k in range(7)]
    r = ev.precision_at_n(preds, [(k, k) for k in range(7)], 7)
    assert r.precision == 1.0 and not r.short_list
    with pytest.raises(ValueError):
        ev.precision_at_n(preds, [(0, 0)], 0)


def test_report_invariants_and_json():
    preds = [P(1, 10, 0.9), P(2, 11, 0.8), P(3, 12, 0.7)]
    rep = ev.evaluate(preds, [(1, 10), (3, 12)])
    assert rep.n == 2
    assert rep.tp + rep.fp == min(rep.n, len(preds))
    assert rep.tp <= rep.num_gt_pairs
    d = json.loads(rep.to_json())
    for key in ("micro_ap", "precision_at_n", "n", "tp", "fp", "num_gt_pairs", "short_list"):
        assert key in d
    assert ev.EvalReport.from_json(rep.to_json()) == rep
    assert "µAP" in rep.table()


def test_compare_reports():
    a = ev.evaluate([P(1, 10, 0.9), P(2, 11, 0.8)], [(1, 10), (2, 20)])
    b = ev.evaluate([P(1, 10, 0.9)], [(1, 10), (2, 20)])
    zero = ev.compare_reports(a, a)
    assert all(v == 0 for v in zero.values())
    delta = ev.compare_reports(a, b)
    assert delta["fp"] == -1 and delta["tp"] == 0
    assert ev.render_delta(a, b, "csv").splitlines()[0] == "field,before,after,delta"
    assert "fp" in ev.render_delta(a, b)
    other = ev.evaluate([P(1, 10, 0.9)], [(1, 10), (2, 21)])
    with pytest.raises(ev.GtMismatch):
        ev.compare_reports(a, other)


# -- random instances against the oracle ------------------------------------------

def _random_instance(r):
    n_gt = int(r.integers(1, 21))
    gt = {(int(q), int(q) + 100) for q in r.choice(40, n_gt, replace=False)}
    pairs = set()
    for _ in range(int(r.integers(0, 101))):
        q = int(r.integers(40))
        ref = q + 100 if r.random() < 0.4 else int(r.integers(100, 160))
        pairs.add((q, ref))
    # coarse scores so that ties occur
    preds = [P(q, ref, float(r.integers(0, 20)) / 20) for q, ref in sorted(pairs)]
    return preds, sorted(gt)


def test_micro_ap_matches_oracle_on_random_instances():
    r = np.random.default_rng(2024)
    for _ in range(100):
        preds, gt = _random_instance(r)
        assert abs(ev.micro_ap(preds, gt) - oracle_ap(preds, gt)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_and_monotone_transform_invariance(seed):
    r = np.random.default_rng(seed)
    preds, gt = _random_instance(r)
    base = ev.micro_ap(preds, gt)
    shuffled = [preds[k] for k in r.permutation(len(preds))]
    assert ev.micro_ap(shuffled, gt) == base
    warped = [P(p.query, p.reference, math.exp(3 * p.score) - 7) for p in preds]
    assert ev.micro_ap(warped, gt) == pytest.approx(base, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_adding_predictions(seed):
    r = np.random.default_rng(seed)
    preds, gt = _random_instance(r)
    base = ev.micro_ap(preds, gt)
    predicted = {(p.query, p.reference) for p in preds}
    lowest = min((p.score for p in preds), default=0.0)
    missing = [g for g in gt if g not in predicted]
    if missing:
        # a correct prediction at the very bottom never hurts
        assert ev.micro_ap(preds + [P(*missing[0], lowest - 1)], gt) >= base
    hits = [p for p in preds if (p.query, p.reference) in set(gt)]
    if hits:
        # a wrong prediction above a hit strictly hurts
        top = max(p.score for p in preds)
        assert ev.micro_ap(preds + [P(999, 999, top + 1)], gt) < base


# -- sweep -----------------------------------------------------------------------

def _sweep_fixture():
    refs = [Descriptor(i, v) for i, v in enumerate(np.eye(4) * 2)]
    index = build_index(refs)
    queries = [Descriptor(10, [1.0, 0.1, 0, 0]), Descriptor(11, [0.1, 1.0, 0, 0])]
    # hard negatives: near-duplicates of reference 0 with larger norms
    queries += [Descriptor(20 + k, [3.0, 0.05 * (k + 1), 0, 0]) for k in range(4)]
    gt = [(10, 0), (11, 1)]
    return queries, index, gt


def test_sweep_non_increasing_and_deterministic():
    queries, index, gt = _sweep_fixture()
    cfg = MatchConfig(filter_enabled=False)
    curve = ev.sweep_hard_negatives(queries, index, cfg, [10, 11], [20, 21, 22, 23], gt)
    assert [f for f, _ in curve] == [0.0, 0.25, 0.5, 0.75, 1.0]
    aps = [a for _, a in curve]
    assert all(x >= y for x, y in zip(aps, aps[1:]))
    assert aps[0] == pytest.approx(ev.micro_ap(match_all(queries[:2], index, cfg), gt))
    assert aps[-1] < aps[0]
    assert curve == ev.sweep_hard_negatives(queries, index, cfg, [10, 11], [20, 21, 22, 23], gt)
    # the norm-ratio filter removes every larger-norm hard negative here
    filtered = ev.sweep_hard_negatives(queries, index, MatchConfig(), [10, 11], [20, 21, 22, 23], gt)
    assert len({a for _, a in filtered}) == 1


def test_sweep_csv_and_svg(tmp_path):
    curve = [(0.0, 0.9), (0.5, 0.7), (1.0, 0.4)]
    ev.write_sweep_csv(tmp_path / "s.csv", curve)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "fraction,micro_ap" and len(lines) == 4
    svg = ev.sweep_svg(curve)
    assert svg.startswith("<svg") and svg.count("<circle") == 3


def test_sweep_rejects_bad_fractions():
    queries, index, gt = _sweep_fixture()
    with pytest.raises(ValueError):
        ev.sweep_hard_negatives(queries, index, MatchConfig(), [10, 11], [20], gt, proportions=(0.5, 0.2))
    with pytest.raises(ValueError):
        ev.sweep_hard_negatives(queries, index, MatchConfig(), [10, 11], [20], gt, proportions=(0.0, 1.5))
