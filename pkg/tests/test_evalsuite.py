import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossdistill.domaingen import TARGET, Dataset, Schema
from crossdistill.errors import PairingError, UndefinedMetricError
from crossdistill.evalsuite import (
    CSV_COLUMNS,
    MetricRow,
    MetricsReport,
    auc,
    compare_across_seeds,
    r_squared,
    sign_test,
    slice_report,
)
from crossdistill.ranker import BINARY, REGRESSION, ScoreTable, TaskHead


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_auc_matches_pairwise_oracle_with_ties():
    rng = np.random.default_rng(0)
    done = 0
    while done < 1000:
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        # Few distinct values force plenty of ties.
        scores = rng.integers(0, int(rng.integers(1, 8)), n) / 7.0
        assert abs(auc(scores, labels) - brute_auc(scores, labels)) < 1e-12
        done += 1


def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.3] * 4, [1, 0, 1, 0]) == 0.5
    assert auc([0.8, 0.3, 0.5, 0.1], [1, 1, 0, 0]) == 0.75


def test_auc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-40, 40).map(lambda k: k / 8), min_size=2, max_size=30), st.data())
def test_auc_invariant_under_increasing_maps(scores, data):
    # Grid values stay distinct under both maps in floating point.
    labels = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    if len(set(labels)) < 2:
        return
    base = auc(scores, labels)
    s = np.asarray(scores)
    assert auc(np.exp(s), labels) == pytest.approx(base, abs=1e-12)
    assert auc(3.0 * s + 1.0, labels) == pytest.approx(base, abs=1e-12)


def test_r_squared_examples():
    assert r_squared([1, 2, 2], [1, 2, 3]) == 0.5
    assert r_squared([4.0, 5.0], [4.0, 5.0]) == 1.0
    assert r_squared([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) == 0.0
    assert r_squared([3.0, 1.0], [1.0, 3.0]) < 0
    with pytest.raises(UndefinedMetricError):
        r_squared([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(UndefinedMetricError):
        r_squared([1.0], [1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=3, max_size=20), st.randoms())
def test_r_squared_ignores_order(pairs, rnd):
    preds, targets = map(list, zip(*pairs))
    if np.var(targets) == 0:
        return
    perm = list(range(len(pairs)))
    rnd.shuffle(perm)
    a = r_squared(preds, targets)
    b = r_squared([preds[i] for i in perm], [targets[i] for i in perm])
    assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


def test_sign_test_values():
    assert sign_test([1.0] * 10) == pytest.approx(0.000977, abs=5e-7)
    assert sign_test([1.0] * 5 + [-1.0] * 5) == pytest.approx(0.623, abs=5e-4)
    assert sign_test([0.0, 0.0]) is None
    assert sign_test([1.0, 0.0, -1.0]) == 0.75


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 25), st.data())
def test_sign_test_is_exact_binomial_tail(n, data):
    k = data.draw(st.integers(0, n))
    deltas = [1.0] * k + [-1.0] * (n - k)
    expected = sum(math.comb(n, i) for i in range(k, n + 1)) / 2**n
    assert sign_test(deltas) == pytest.approx(expected, rel=1e-12)


def test_compare_across_seeds_pairs_and_checks():
    control = {s: ("fp", 0.70) for s in range(1, 11)}
    distilled = {s: ("fp", 0.71 + 0.001 * s) for s in range(1, 11)}
    cmp = compare_across_seeds(control, distilled, "ctr")
    assert cmp.positive == 10
    assert cmp.p_value == pytest.approx(1 / 1024)
    assert cmp.median_delta == pytest.approx(0.0155)
    with pytest.raises(PairingError, match="unpaired"):
        compare_across_seeds(control, {s: v for s, v in distilled.items() if s != 3})
    with pytest.raises(PairingError, match="fingerprints"):
        compare_across_seeds(control, {**distilled, 4: ("other", 0.8)})
    with pytest.raises(PairingError, match="at least 5"):
        compare_across_seeds({1: ("f", 0.1)}, {1: ("f", 0.2)})


def test_compare_skips_absent_values():
    control = {s: ("f", 0.5) for s in range(5)}
    distilled = {**{s: ("f", 0.6) for s in range(4)}, 4: ("f", None)}
    cmp = compare_across_seeds(control, distilled)
    assert cmp.seeds == [0, 1, 2, 3]


def slice_dataset(new_flags, click, trail):
    n = len(click)
    labels = {
        "click": np.asarray(click, float),
        "trail": np.asarray(trail, float),
        "discovery": np.zeros(n),
        "continue_watch": np.zeros(n),
        "radio_engagement": np.zeros(n),
    }
    new = np.asarray(new_flags, bool)
    x = np.zeros((n, 2))
    x[:, 1] = new
    return Dataset(Schema(2, (), 1), TARGET, np.arange(n), x, new, labels, fingerprint="f")


def test_slice_report_partitions_and_absent_slices():
    data = slice_dataset([0, 0, 0, 0], [1, 0, 1, 0], [2.0, np.nan, 1.0, np.nan])
    table = ScoreTable(np.arange(4), {"ctr": np.array([0.9, 0.2, 0.6, 0.4])}, {})
    rep = slice_report(table, data, TaskHead("ctr", BINARY, "click"), "m", 1)
    values = {r.slice: r.value for r in rep.rows}
    counts = {r.slice: r.count for r in rep.rows}
    assert values == {"all": 1.0, "new_item": None, "established": 1.0}
    assert counts["all"] == counts["new_item"] + counts["established"]


def test_r2_slice_uses_clicked_rows_only():
    data = slice_dataset([0, 0, 0, 0], [1, 0, 1, 1], [1.0, np.nan, 2.0, 3.0])
    table = ScoreTable(np.arange(4), {"trail": np.array([1.0, 99.0, 2.0, 2.0])}, {})
    rep = slice_report(table, data, TaskHead("trail", REGRESSION, "trail"))
    assert rep.get("trail", "r2") == 0.5


def test_slice_report_rejects_misaligned_scores():
    data = slice_dataset([0, 1], [1, 0], [1.0, np.nan])
    table = ScoreTable(np.array([1, 0]), {"ctr": np.zeros(2)}, {})
    with pytest.raises(ValueError):
        slice_report(table, data, TaskHead("ctr", BINARY, "click"))


def test_metrics_csv_round_trip():
    rep = MetricsReport([
        MetricRow("control", "ctr", "all", "auc", 0.7123456789012345, 3),
        MetricRow("control", "ctr", "new_item", "auc", None, 3),
        MetricRow("distilled", "trail", "all", "r2", -0.25, 3),
    ], "abc")
    text = rep.to_csv()
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    back = MetricsReport.from_csv(text, "abc")
    assert back.to_csv() == text
    assert back.get("ctr", "auc", model="control") == 0.7123456789012345
    assert back.get("ctr", "auc", "new_item") is None
