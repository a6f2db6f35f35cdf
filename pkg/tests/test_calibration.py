import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modelab.calibration import (EvalReport, Predictions, accuracy, activation_heatmap,
                                 auprc_correctness, auroc_correctness, curve_slope, ece,
                                 evaluate, mce, nce, nce_from_nll, nll, per_task_accuracy,
                                 prior_entropy, rejection_curve)
from modelab.errors import DomainError

# brute-force oracles: plain loops over records, no shared helpers with the library


def _conf_correct(labels, probs):
    out = []
    for y, p in zip(labels, probs):
        pred = 1 if p > 0.5 else 0
        out.append((max(p, 1.0 - p), pred == y))
    return out


def oracle_bins(labels, probs, n_bins=10):
    bins = [[] for _ in range(n_bins)]
    for c, ok in _conf_correct(labels, probs):
        for k in range(n_bins):
            if (k / n_bins < c or k == 0) and c <= (k + 1) / n_bins:
                bins[k].append((c, ok))
                break
    return [b for b in bins if b]


def oracle_ece(labels, probs, n_bins=10):
    n = len(labels)
    total = 0.0
    for b in oracle_bins(labels, probs, n_bins):
        acc = sum(ok for _, ok in b) / len(b)
        conf = sum(c for c, _ in b) / len(b)
        total += len(b) / n * abs(acc - conf)
    return total


def oracle_mce(labels, probs, n_bins=10):
    return max(abs(sum(ok for _, ok in b) / len(b) - sum(c for c, _ in b) / len(b))
               for b in oracle_bins(labels, probs, n_bins))


def oracle_nll(labels, probs):
    return sum(-math.log(max(p if y == 1 else 1 - p, 1e-12)) for y, p in zip(labels, probs)) / len(labels)


def oracle_nce(labels, probs):
    q = sum(labels) / len(labels)
    h = -(q * math.log(q) + (1 - q) * math.log(1 - q))
    return (h - oracle_nll(labels, probs)) / h


def oracle_auroc(labels, probs):
    cc = _conf_correct(labels, probs)
    pos = [c for c, ok in cc if ok]
    neg = [c for c, ok in cc if not ok]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def oracle_auprc(labels, probs):
    cc = _conf_correct(labels, probs)
    n_pos = sum(ok for _, ok in cc)
    total, prev_recall = 0.0, 0.0
    for t in sorted({c for c, _ in cc}, reverse=True):
        kept = [ok for c, ok in cc if c >= t]
        tp = sum(kept)
        recall = tp / n_pos
        total += (recall - prev_recall) * (tp / len(kept))
        prev_recall = recall
    return total


def oracle_rejection(labels, probs, rates):
    cc = _conf_correct(labels, probs)
    order = sorted(range(len(cc)), key=lambda i: cc[i][0])  # sorted() is stable
    out = []
    for r in rates:
        k = int(math.floor(r * len(cc) + 1e-9))
        if k >= len(cc):
            continue
        kept = [cc[i][1] for i in order[k:]]
        out.append((r, sum(kept) / len(kept)))
    return out


def random_set(rng):
    n = int(rng.integers(2, 501))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    if rng.random() < 0.5:
        probs = rng.choice(np.linspace(0, 1, 21), n)  # ties and exact bin edges
    else:
        probs = rng.beta(2, 2, n)
    return labels, probs


def test_metrics_match_oracles_on_100_sets():
    rng = np.random.default_rng(0)
    rates = [0.0, 0.05, 0.1, 0.2, 0.29, 0.3, 0.5]
    checked = 0
    for _ in range(100):
        labels, probs = random_set(rng)
        preds = Predictions.from_arrays(labels, probs)
        assert abs(ece(preds) - oracle_ece(labels, probs)) <= 1e-12
        assert abs(mce(preds) - oracle_mce(labels, probs)) <= 1e-12
        assert abs(nll(preds) - oracle_nll(labels, probs)) <= 1e-12
        assert abs(nce(preds) - oracle_nce(labels, probs)) <= 1e-12
        got = rejection_curve(preds, rates)
        want = oracle_rejection(labels, probs, rates)
        assert [r for r, _ in got] == [r for r, _ in want]
        assert max(abs(a - b) for (_, a), (_, b) in zip(got, want)) <= 1e-12
        correct = preds.correct
        if 0 < correct.sum() < len(correct):
            assert abs(auroc_correctness(preds) - oracle_auroc(labels, probs)) <= 1e-12
            assert abs(auprc_correctness(preds) - oracle_auprc(labels, probs)) <= 1e-12
            checked += 1
    assert checked > 80


def test_nce_reproduces_reference_pairs():
    h = 0.652
    assert abs(nce_from_nll(0.805, h) - -0.235) <= 0.005
    assert abs(nce_from_nll(0.645, h) - 0.013) <= 0.005


def test_prior_entropy_values():
    assert prior_entropy(np.array([0, 1])) == pytest.approx(math.log(2))
    p = 0.6
    assert prior_entropy(np.array([1] * 6 + [0] * 4)) == pytest.approx(
        -(p * math.log(p) + (1 - p) * math.log(1 - p)))
    with pytest.raises(DomainError):
        nce(Predictions.from_arrays([1, 1], [0.7, 0.8]))


def test_perfect_and_uninformative_predictions():
    labels = np.array([0, 1, 1, 0, 1])
    perfect = Predictions.from_arrays(labels, labels.astype(float))
    assert ece(perfect) == 0.0 and nll(perfect) < 1e-11 and nce(perfect) == pytest.approx(1.0)
    prior = Predictions.from_arrays(labels, np.full(5, 0.6))
    assert nce(prior) == pytest.approx(0.0, abs=1e-12)


def test_nll_floor_keeps_wrong_certainty_finite():
    preds = Predictions.from_arrays([1], [0.0])
    assert nll(preds) == pytest.approx(-math.log(1e-12))


def test_auroc_edge_cases():
    with pytest.raises(DomainError):
        auroc_correctness(Predictions.from_arrays([1, 1], [0.9, 0.8]))
    # confidence perfectly separates right from wrong
    preds = Predictions.from_arrays([1, 1, 0, 0], [0.95, 0.9, 0.6, 0.55])
    assert auroc_correctness(preds) == 1.0 and auprc_correctness(preds) == 1.0


def test_rejection_curve_ties_break_by_order():
    # equal confidence; the earlier (wrong) record is withheld first
    preds = Predictions.from_arrays([0, 1], [0.7, 0.7])
    assert rejection_curve(preds, [0.0, 0.5]) == [(0.0, 0.5), (0.5, 1.0)]


def test_rejection_curve_skips_empty_points():
    preds = Predictions.from_arrays([1], [0.9])
    with pytest.warns(RuntimeWarning):
        assert rejection_curve(preds, [0.0, 1 - 1e-12]) == [(0.0, 1.0)]
    with pytest.raises(DomainError):
        rejection_curve(preds, [1.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 20))
def test_ece_bounded_by_mce(seed, n_bins):
    labels, probs = random_set(np.random.default_rng(seed))
    preds = Predictions.from_arrays(labels, probs)
    assert 0.0 <= ece(preds, n_bins) <= mce(preds, n_bins) + 1e-15 <= 1.0 + 1e-15


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_metrics_invariant_to_record_permutation(seed):
    rng = np.random.default_rng(seed)
    labels, probs = random_set(rng)
    probs = probs + rng.normal(0, 1e-6, len(probs))  # no ties, so order cannot matter
    probs = np.clip(probs, 0.0, 1.0)
    a = Predictions.from_arrays(labels, probs)
    perm = rng.permutation(len(labels))
    b = Predictions.from_arrays(labels[perm], probs[perm])
    for f in (ece, mce, nll):
        assert f(a) == pytest.approx(f(b), abs=1e-12)
    if 0 < a.correct.sum() < len(a):
        assert auroc_correctness(a) == pytest.approx(auroc_correctness(b), abs=1e-12)


def test_curve_slope():
    assert curve_slope([(0.0, 0.6), (0.1, 0.65), (0.2, 0.7), (0.3, 0.75), (0.4, 0.0)]) == \
        pytest.approx(0.5)
    assert curve_slope([(0.0, 0.6)]) == 0.0


def test_per_task_and_average_accuracy():
    preds = Predictions.from_arrays([1, 0, 1, 1], [0.9, 0.8, 0.4, 0.7], task_id=[0, 0, 1, 1])
    assert per_task_accuracy(preds) == {0: 0.5, 1: 0.5}
    assert accuracy(preds) == 0.5


def test_activation_heatmap_marks_missing_tasks():
    mat, missing = activation_heatmap([0, 0, 2], np.array([[1.0, 0.0], [0.0, 1.0], [0.3, 0.7]]),
                                      n_tasks=3)
    np.testing.assert_allclose(mat[0], [0.5, 0.5])
    assert np.isnan(mat[1]).all() and missing == [1]


def test_report_serialization(tmp_path):
    rng = np.random.default_rng(1)
    labels, probs = rng.integers(0, 2, 50), rng.random(50)
    report = evaluate(Predictions.from_arrays(labels, probs, task_id=rng.integers(0, 2, 50)),
                      routing_task_id=[0, 1, 1], routing_weights=np.eye(2)[[0, 1, 1]], n_tasks=3)
    paths = report.write(tmp_path)
    data = json.loads(paths["report"].read_text())
    assert set(EvalReport.METRICS) <= set(data) and data["n_records"] == 50
    assert paths["rejection"].read_text().startswith("rejection_rate,retained_accuracy")
    assert paths["heatmap"].read_text().splitlines()[0] == "task_id,expert_0,expert_1"
    assert data["activation"][2] == [None, None]
