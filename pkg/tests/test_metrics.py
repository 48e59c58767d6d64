import json

import numpy as np
import pytest

from segcode.metrics import (MetricsError, compare_report, format_metrics, format_report, load_results,
                             mcnemar, mcnemar_from_counts, metrics, paired_outcome, save_results)


def test_perfect_predictions():
    m = metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
    assert m.accuracy == 1.0 and m.macro_f1 == 1.0


def test_all_zero_predictions_hand_values():
    m = metrics([0, 0, 0, 0], [0, 0, 1, 1], 2)
    assert m.accuracy == 0.5
    assert m.per_class_f1 == pytest.approx([2 / 3, 0.0])
    assert m.macro_f1 == pytest.approx(1 / 3)
    assert m.confusion.tolist() == [[2, 0], [2, 0]]


def test_eighteen_class_report(rng):
    labels = rng.integers(0, 18, size=50)
    m = metrics(rng.integers(0, 18, size=50), labels, 18)
    assert len(m.per_class_f1) == 18 and m.confusion.sum() == 50


def test_undefined_f1_flagged():
    m = metrics([0, 1], [0, 1], 3)
    assert m.per_class_f1[2] == 0.0 and m.undefined_f1 == [2]
    assert "no predictions, no instances" in format_metrics(m)


@pytest.mark.parametrize("preds, labels", [([], []), ([0, 1], [0]), ([0, 3], [0, 1])])
def test_metric_errors(preds, labels):
    with pytest.raises(MetricsError):
        metrics(preds, labels, 3)


def test_binary_f1_matches_hand_oracle(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        y, p = rng.integers(0, 2, n), rng.integers(0, 2, n)
        m = metrics(p, y, 2)
        for c in (0, 1):
            tp = np.sum((p == c) & (y == c))
            fp = np.sum((p == c) & (y != c))
            fn = np.sum((p != c) & (y == c))
            ref = 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
            assert m.per_class_f1[c] == pytest.approx(ref, abs=1e-12)


def test_macro_f1_invariant_under_relabeling(rng):
    y, p = rng.integers(0, 5, 60), rng.integers(0, 5, 60)
    perm = rng.permutation(5)
    assert metrics(perm[p], perm[y], 5).macro_f1 == pytest.approx(metrics(p, y, 5).macro_f1, abs=1e-15)


# ---- McNemar ---------------------------------------------------------------------

def test_mcnemar_hand_cases():
    a = mcnemar_from_counts(15, 1)
    assert a["statistic"] == 10.5625 and a["significant"]
    b = mcnemar_from_counts(12, 2)
    assert b["statistic"] == pytest.approx(81 / 14) and round(b["statistic"], 3) == 5.786
    assert not b["significant"]


def test_mcnemar_critical_value():
    # p < 0.01 exactly when the statistic exceeds the chi-square(1) quantile 6.635
    assert mcnemar_from_counts(10, 0)["p_value"] < 0.01  # 8.1
    assert mcnemar_from_counts(9, 1)["p_value"] > 0.01   # 4.9
    from math import erfc, sqrt
    assert erfc(sqrt(6.634897 / 2)) == pytest.approx(0.01, rel=1e-6)


def test_mcnemar_identical_predictions(rng):
    y = rng.integers(0, 3, 20)
    p = rng.integers(0, 3, 20)
    r = mcnemar(p, p, y)
    assert (r["n01"], r["n10"], r["statistic"], r["significant"]) == (0, 0, 0.0, False)


def test_mcnemar_length_mismatch():
    with pytest.raises(MetricsError):
        mcnemar([0, 1], [0], [0, 1])


def test_paired_outcome_accuracy_identities(rng):
    y = rng.integers(0, 4, 200)
    a, b = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
    po = paired_outcome(a, b, y)
    assert po.total == 200
    assert metrics(b, y, 4).accuracy == pytest.approx((po.n11 + po.n01) / po.total)
    assert metrics(a, y, 4).accuracy == pytest.approx((po.n11 + po.n10) / po.total)


# ---- results and reports --------------------------------------------------------------

def _results(preds, labels, ids=None):
    ids = ids or [f"c{i}" for i in range(len(preds))]
    return {"clips": [{"clip_id": i, "label": y, "pred": p, "probs": [0.5, 0.5]}
                      for i, p, y in zip(ids, preds, labels)], "classes": ["x", "y"]}


def test_compare_identical_runs():
    r = _results([0, 1, 1, 0], [0, 1, 0, 0])
    rep = compare_report(r, r)
    assert rep["delta_accuracy"] == 0 and rep["delta_macro_f1"] == 0
    assert all(d == 0 for d in rep["delta_per_class_f1"])
    assert not rep["mcnemar"]["significant"]


def test_compare_report_text_three_decimals():
    a, b = _results([0, 0, 0, 0], [0, 1, 0, 1]), _results([0, 1, 0, 0], [0, 1, 0, 1])
    text = format_report(compare_report(a, b, ("rgb", "two")))
    assert "macro F1" in text and "0.333" in text and "0.733" in text
    assert "McNemar" in text


def test_compare_mismatched_ids_lists_them():
    a = _results([0, 1], [0, 1], ["a", "b"])
    b = _results([0, 1], [0, 1], ["a", "z"])
    with pytest.raises(MetricsError, match=r"'b'.*'z'"):
        compare_report(a, b)


def test_results_file_round_trip(tmp_path):
    r = _results([1, 0], [1, 1])
    save_results(tmp_path / "r.json", r["clips"], r["classes"])
    assert load_results(tmp_path / "r.json") == r
    (tmp_path / "bad.json").write_text(json.dumps({"x": 1}))
    with pytest.raises(MetricsError):
        load_results(tmp_path / "bad.json")


def test_format_metrics_percentages():
    text = format_metrics(metrics([0, 0, 0, 0], [0, 0, 1, 1], 2), ["a", "b"])
    assert "accuracy  50.000%" in text and "macro F1  33.333%" in text
