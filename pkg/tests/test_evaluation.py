import json
import math

import numpy as np
import pytest

from oracles import binary_mcc as oracle_binary_mcc
from oracles import brute_metrics, fleiss_by_definition
from phonorec.errors import EmptyMatrix, MismatchedTestSets, RowSumMismatch
from phonorec.evaluation import (
    ConfusionMatrix,
    EvalReport,
    Metrics,
    accuracy_ci,
    agreement,
    binary_mcc,
    cross_task_misclassification,
    fleiss_kappa,
    joint_misclassified,
    metrics,
    multiclass_mcc,
    render_table,
)
from phonorec.phonology import TOTAL_VIDEOS, PropertyKind, builtin_taxonomy

KIND = PropertyKind.FLEXION


def random_prediction_set(rng):
    k = int(rng.integers(2, 11))
    n = int(rng.integers(1, 201))
    classes = [f"c{i}" for i in range(k)]
    true = list(rng.choice(classes, size=n))
    # mix of right answers and noise so MCC is spread over its range
    keep = rng.random(n) < rng.random()
    pred = [t if keep[i] else str(rng.choice(classes)) for i, t in enumerate(true)]
    return true, pred


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        true, pred = random_prediction_set(rng)
        m = metrics(ConfusionMatrix.from_labels(true, pred))
        ref = brute_metrics(true, pred)
        for name in Metrics.NAMES:
            assert abs(getattr(m, name) - ref[name]) <= 1e-9, name
        assert m.balanced_accuracy == m.macro_recall
        assert m.micro_precision == m.micro_recall == m.accuracy


def test_binary_mcc_hand_example():
    counts = np.array([[45, 5], [10, 40]])
    expect = 1750 / math.sqrt(50 * 55 * 50 * 45)
    assert abs(multiclass_mcc(counts) - expect) <= 1e-12
    assert round(expect, 4) == 0.7035


def test_multiclass_mcc_reduces_to_binary_formula():
    rng = np.random.default_rng(5)
    for _ in range(500):
        tp, fn, fp, tn = (int(v) for v in rng.integers(0, 60, 4))
        # rows = true (positive, negative), cols = predicted
        counts = np.array([[tp, fn], [fp, tn]])
        if counts.sum() == 0:
            continue
        assert abs(multiclass_mcc(counts) - oracle_binary_mcc(tp, tn, fp, fn)) <= 1e-12
        assert abs(binary_mcc(tp, tn, fp, fn) - oracle_binary_mcc(tp, tn, fp, fn)) <= 1e-12


def test_perfect_classifier():
    cm = ConfusionMatrix(("a", "b", "c"), np.diag([3, 4, 5]))
    m = metrics(cm)
    assert m.accuracy == m.balanced_accuracy == m.macro_precision == m.macro_recall == m.mcc == 1.0


def test_empty_matrix():
    with pytest.raises(EmptyMatrix):
        metrics(ConfusionMatrix(("a", "b"), np.zeros((2, 2))))


def test_confusion_counts():
    cm = ConfusionMatrix.from_labels(["a", "a", "b", "c"], ["a", "b", "b", "a"])
    assert cm.classes == ("a", "b", "c")
    assert cm.tp().tolist() == [1, 1, 0]
    assert cm.fp().tolist() == [1, 1, 0]
    assert cm.fn().tolist() == [1, 0, 1]
    assert cm.tn().tolist() == [1, 2, 3]
    assert cm.total == 4


def test_undefined_precision_flag():
    m = metrics(ConfusionMatrix.from_labels(["a", "b", "b"], ["b", "b", "b"]))
    assert m.undefined_precision == ("a",)
    assert m.macro_precision == pytest.approx((0 + 2 / 3) / 2)


def test_flexion_majority_baseline():
    tax = builtin_taxonomy()
    true = tax.expand(KIND)
    assert len(true) == TOTAL_VIDEOS
    m = metrics(ConfusionMatrix.from_labels(true, ["1"] * len(true), kind=KIND))
    assert abs(100 * m.accuracy - 50.3) <= 0.1
    assert m.balanced_accuracy == pytest.approx(1 / 9, abs=1e-12)


def test_constant_classifier_balanced_accuracy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        true, _ = random_prediction_set(rng)
        m = metrics(ConfusionMatrix.from_labels(true, [true[0]] * len(true)))
        assert m.balanced_accuracy == pytest.approx(1 / len(set(true)), abs=1e-12)


@pytest.mark.parametrize("p,n,expect,tol", [
    (0.845, 1503, 0.0183, 5e-5),
    (0.5, 100, 0.098, 5e-4),
    (0.0, 50, 0.0, 0.0),
    (1.0, 50, 0.0, 0.0),
])
def test_accuracy_ci(p, n, expect, tol):
    assert abs(accuracy_ci(p, n) - expect) <= tol


def test_accuracy_ci_rejects_bad_input():
    with pytest.raises(ValueError):
        accuracy_ci(1.2, 10)
    with pytest.raises(ValueError):
        accuracy_ci(0.5, 0)


def test_fleiss_hand_examples():
    assert fleiss_kappa([[2, 1], [1, 2]], 3) == pytest.approx(-1 / 3, abs=1e-12)
    assert fleiss_kappa([[3, 0, 0], [0, 3, 0], [0, 0, 3]], 3) == pytest.approx(1.0)
    assert math.isnan(fleiss_kappa([[3, 0], [3, 0]], 3))
    with pytest.raises(RowSumMismatch):
        fleiss_kappa([[2, 1], [1, 1]], 3)


def test_fleiss_matches_definition_and_is_permutation_invariant():
    rng = np.random.default_rng(8)
    for _ in range(50):
        items, cats, raters = int(rng.integers(2, 8)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        ratings = np.array([rng.multinomial(raters, np.ones(cats) / cats) for _ in range(items)])
        ref = fleiss_by_definition(ratings.tolist())
        k = fleiss_kappa(ratings, raters)
        if ref is None:
            assert math.isnan(k)
            continue
        assert abs(k - float(ref)) <= 1e-12
        assert -1.0 - 1e-12 <= k <= 1.0 + 1e-12
        for _ in range(3):
            perm = rng.permutation(cats)
            assert fleiss_kappa(ratings[:, perm], raters) == pytest.approx(k, abs=1e-12)


def make_reports(rng, n_ids=30, n_models=3, classes=("1", "2", "3", "4")):
    ids = [f"v{i:03d}" for i in range(n_ids)]
    truth = {v: str(rng.choice(classes)) for v in ids}
    reports = []
    for m in range(n_models):
        rows = []
        for v in ids:
            wrong = rng.random() < 0.5
            pred = str(rng.choice([c for c in classes if c != truth[v]])) if wrong else truth[v]
            rows.append((v, truth[v], pred))
        reports.append(EvalReport.build(KIND, "phoneme", f"m{m}", rows, classes))
    return reports


def test_joint_misclassified_matches_brute_intersection():
    rng = np.random.default_rng(17)
    for _ in range(50):
        reports = make_reports(rng)
        ids, ratings, cats = joint_misclassified(reports)
        brute = None
        for r in reports:
            errs = {v for v, t, p in r.records if t != p}
            brute = errs if brute is None else brute & errs
        assert ids == sorted(brute)
        assert (ratings.sum(axis=1) == 3).all()
        pos = {c: i for i, c in enumerate(cats)}
        for row, v in zip(ratings, ids):
            truth = dict((vid, t) for vid, t, _ in reports[0].records)[v]
            assert row[pos[truth]] == 0


def test_joint_misclassified_examples():
    rows = [("a", "1", "2"), ("b", "1", "1")]
    reps = [EvalReport.build(KIND, "phoneme", f"m{i}", rows, ("1", "2", "3")) for i in range(3)]
    ids, ratings, cats = joint_misclassified(reps)
    assert ids == ["a"] and cats == ("1", "2", "3") and ratings.tolist() == [[0, 3, 0]]
    perfect = EvalReport.build(KIND, "phoneme", "p", [("a", "1", "1"), ("b", "1", "1")])
    assert joint_misclassified(reps[:2] + [perfect])[0] == []


def test_mismatched_test_sets():
    a = EvalReport.build(KIND, "phoneme", "a", [("x", "1", "1")])
    b = EvalReport.build(KIND, "phoneme", "b", [("y", "1", "1")])
    with pytest.raises(MismatchedTestSets):
        joint_misclassified([a, b])


def test_agreement_report():
    rng = np.random.default_rng(3)
    rep = agreement(make_reports(rng, n_ids=80))
    assert len(rep.ids) >= 2 and rep.kappa is not None and -1 <= rep.kappa <= 1
    assert set(rep.predictions) == set(rep.ids)
    assert all(len(p) == 3 for p in rep.predictions.values())
    doc = rep.to_json()
    assert doc["category_space"] and doc["jointly_misclassified"] == rep.ids


def test_cross_task_rates():
    shared = {f"s{i}" for i in range(10)}
    test_sets = {"flexion": shared | {"f1", "f2"}, "movement": shared | {"m1"}}
    joint = {"flexion": {"s0", "s1", "f1"}, "movement": {"s0", "m1"}}
    rates = cross_task_misclassification(joint, test_sets)
    assert rates[2].videos == 10 and rates[2].misclassified == 1
    assert rates[2].rate == pytest.approx(0.1)

    apart = cross_task_misclassification({"a": {"x"}, "b": {"y"}}, {"a": {"x"}, "b": {"y"}})
    assert apart[2].videos == 0 and apart[2].rate is None
    assert apart[2].to_json()["rate"] is None


def test_cross_task_three_tasks_brute():
    rng = np.random.default_rng(4)
    vids = [f"v{i}" for i in range(60)]
    tasks = ["a", "b", "c"]
    test_sets = {t: {v for v in vids if rng.random() < 0.5} for t in tasks}
    joint = {t: {v for v in test_sets[t] if rng.random() < 0.3} for t in tasks}
    rates = cross_task_misclassification(joint, test_sets)
    for m in (2, 3):
        members = [v for v in vids if sum(v in test_sets[t] for t in tasks) == m]
        bad = [v for v in members if all(v in joint[t] for t in tasks if v in test_sets[t])]
        assert (rates[m].videos, rates[m].misclassified) == (len(members), len(bad))


def test_report_json_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rep = make_reports(rng, n_models=1)[0]
    path = tmp_path / "r.json"
    rep.save(path)
    back = EvalReport.load(path)
    assert back.dumps() == rep.dumps()
    doc = json.loads(path.read_text())
    assert set(Metrics.NAMES) <= set(doc["metrics"])
    # metrics are recomputable from the stored confusion matrix
    again = metrics(ConfusionMatrix.from_json(doc["confusion"]))
    assert again.as_dict() == doc["metrics"]


def test_render_table_text_and_csv():
    rows = [(f"v{i}", "1" if i < 6 else "2", "1") for i in range(10)]
    reps = [EvalReport.build(KIND, "phoneme", "baseline", rows),
            EvalReport.build(PropertyKind.MOVEMENT, "phoneme", "baseline",
                             [(v, "BackAndForth", "BackAndForth") for v, _, _ in rows])]
    text = render_table(reps)
    lines = text.splitlines()
    assert lines[0].split()[:3] == ["mode", "model", "flexion"]
    assert "60.0 ± 30.4" in lines[1] and "50.0" in lines[1] and "100.0 ± 0.0" in lines[1]
    csv_text = render_table(reps, fmt="csv")
    assert csv_text.splitlines()[1].startswith("phoneme,baseline,60.0 ± 30.4,50.0")


def test_metric_names_are_the_seven():
    assert len(Metrics.NAMES) == 7 and len(set(Metrics.NAMES)) == 7
