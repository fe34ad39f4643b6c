import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import exhaustive_thresholds, pr_at, set_metrics
from scorealign.evaluation import (
    as_label_matrix,
    average_precision,
    counts_at_thresholds,
    evaluate,
    mirex_metrics,
    polyphony_mask,
    polyphony_subset,
    pr_curve_and_ap,
    precision_recall,
    write_pr_curve,
    write_report_csv,
)


def exhaustive_ap(scores, truths):
    cs = exhaustive_thresholds(scores)
    points = [pr_at(scores, truths, c) for c in cs]
    return average_precision([p for p, _ in points], [r for _, r in points])


def test_identical_predictions():
    pr = precision_recall([{60}, {60, 64}], [{60}, {60, 64}])
    assert (pr.precision, pr.recall) == (1.0, 1.0)


def test_hand_counted_case():
    pr = precision_recall([{60}, {60}], [{60}, {60, 64}])
    assert pr.precision == 1.0
    assert pr.recall == pytest.approx(2 / 3)


def test_no_predictions_flagged():
    pr = precision_recall([set(), set()], [{60}, {61}])
    assert (pr.precision, pr.recall, pr.no_predictions) == (1.0, 0.0, True)


def test_zero_truth_rejected():
    with pytest.raises(ValueError):
        precision_recall([{1}], [set()])


def test_perfect_scorer_ap():
    truths = np.zeros((10, 128), dtype=bool)
    truths[np.arange(10), np.arange(10) + 50] = True
    assert pr_curve_and_ap(truths.astype(float), truths).average_precision == 1.0


def test_constant_scorer_ap_is_density(rng):
    truths = rng.random((30, 128)) < 0.07
    curve = pr_curve_and_ap(np.full((30, 128), 0.3), truths)
    assert curve.average_precision == pytest.approx(truths.mean())


def test_grid_ap_close_to_exhaustive(rng):
    for _ in range(10):
        scores = rng.random((20, 128))
        truths = rng.random((20, 128)) < 0.05 + 0.3 * scores
        grid = pr_curve_and_ap(scores, truths, grid_size=512).average_precision
        assert abs(grid - exhaustive_ap(scores, truths)) <= 0.02


def test_counts_match_direct(rng):
    scores = rng.random((15, 128))
    truths = rng.random((15, 128)) < 0.1
    cs = np.linspace(-0.1, 1.1, 37)
    tp, npred, ntrue = counts_at_thresholds(scores, truths, cs)
    for k, c in enumerate(cs):
        assert tp[k] == np.count_nonzero((scores > c) & truths)
        assert npred[k] == np.count_nonzero(scores > c)
    assert ntrue == truths.sum()


def test_recall_nonincreasing_in_threshold(rng):
    scores = rng.random((40, 128))
    truths = rng.random((40, 128)) < 0.1
    curve = pr_curve_and_ap(scores, truths)
    assert np.all(np.diff(curve.recall) <= 0)


@given(st.permutations(range(12)))
def test_counts_permutation_invariant(order):
    rng = np.random.default_rng(7)
    pred = rng.random((12, 128)) < 0.1
    true = rng.random((12, 128)) < 0.1
    a = precision_recall(pred, true)
    b = precision_recall(pred[list(order)], true[list(order)])
    assert a == b


def test_polyphony_subsets(rng):
    truths = np.zeros((6, 128), dtype=bool)
    truths[0, 60] = True
    truths[1, [60, 64, 67]] = True
    truths[3, 50] = True
    assert polyphony_mask(truths, 1).tolist() == [True, False, False, True, False, False]
    assert polyphony_mask(truths, 0).tolist() == [False, False, True, False, True, True]
    random = rng.random((200, 128)) < 0.02
    for k in range(4):
        brute = [i for i in range(200) if bin(int("".join("1" if b else "0" for b in random[i]), 2)).count("1") == k]
        assert np.flatnonzero(polyphony_mask(random, k)).tolist() == brute
    scores, sub = polyphony_subset((np.arange(6 * 128.0).reshape(6, 128), truths), 3)
    assert sub.shape == (1, 128) and scores[0, 0] == 128


def test_mirex_identical_and_empty():
    truths = [{60}, {60, 64}]
    m = mirex_metrics(truths, truths)
    assert (m.acc, m.e_tot, m.e_sub, m.e_miss, m.e_fa) == (1.0, 0, 0, 0, 0)
    m = mirex_metrics([set(), set()], truths)
    assert (m.acc, m.e_sub, m.e_miss, m.e_fa, m.e_tot) == (0.0, 0.0, 1.0, 0.0, 1.0)


def test_mirex_hand_case():
    m = mirex_metrics([{60}, {60, 67}, set()], [{60}, {60, 64}, {64}])
    # N_corr = 1, 1, 0; N_ref = 1, 2, 1; N_sys = 1, 2, 0
    assert m.acc == pytest.approx(2 / (4 + 3 - 2))
    assert m.e_sub == 0.25
    assert m.e_miss == 0.25
    assert m.e_fa == 0.0
    assert m.e_tot == 0.5


def test_mirex_matches_set_arithmetic(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        pred = [set(rng.choice(12, rng.integers(0, 5), replace=False).tolist()) for _ in range(n)]
        true = [set(rng.choice(12, rng.integers(0, 4), replace=False).tolist()) for _ in range(n)]
        if not any(true):
            continue
        m = mirex_metrics(pred, true)
        ref = set_metrics(pred, true)
        assert m.e_tot == m.e_sub + m.e_miss + m.e_fa
        assert m.acc == pytest.approx(ref["acc"])
        assert (m.e_sub, m.e_miss, m.e_fa) == pytest.approx((ref["e_sub"], ref["e_miss"], ref["e_fa"]))
        assert 0 <= m.acc <= 1 and m.e_sub <= 1 and m.e_miss <= 1 and m.e_fa >= 0


def test_mirex_needs_references():
    with pytest.raises(ValueError):
        mirex_metrics([{1}], [set()])


def test_evaluate_report_and_files(tmp_path, rng):
    truths = rng.random((50, 128)) < 0.05
    scores = truths + 0.3 * rng.random((50, 128))
    report = evaluate(scores, truths, 0.65, grid_size=64)
    assert report.precision == 1.0 and report.recall == 1.0 and report.f1 == 1.0
    assert report.average_precision == 1.0
    assert report.mirex.acc == 1.0
    text = report.summary_text()
    assert "mirex:" in text and "e_fa" in text
    write_report_csv(report, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "threshold,precision,recall" and len(lines) == 65
    write_pr_curve(report, tmp_path / "pr.txt")
    rows = [tuple(map(float, l.split())) for l in (tmp_path / "pr.txt").read_text().splitlines()]
    assert [r for r, _ in rows] == sorted(r for r, _ in rows)


def test_evaluate_subset_names(rng):
    truths = np.zeros((4, 128), dtype=bool)
    truths[0, 1] = truths[1, [1, 2, 3]] = truths[2, 5] = True
    scores = truths.astype(float)
    assert evaluate(scores, truths, 0.5, subset=1).subset == "Mono"
    poly = evaluate(scores, truths, 0.5, subset=3)
    assert (poly.subset, poly.points) == ("Poly3", 1)
    with pytest.raises(ValueError):
        evaluate(scores, truths, 0.5, subset=7)


def test_label_matrix_from_sets():
    m = as_label_matrix([{0, 127}, set()])
    assert m.shape == (2, 128) and m.sum() == 2
