import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import cohen_kappa_score

from geodiffnet.data import LabelMap
from geodiffnet.exceptions import DataError, DimensionError
from geodiffnet.metrics import (EmptyEvaluationError, aa, confusion, evaluate, format_table, kappa,
                                mean_f1, mean_iou, oa, per_class_accuracy, table_csv, table_rows)


def loop_confusion(pred, truth, c):
    m = np.zeros((c, c), dtype=np.int64)
    for p, t in zip(pred.ravel(), truth.ravel()):
        if t != 0:
            m[t - 1, p - 1] += 1
    return m


def oracle_stats(m):
    # plain-python evaluation of the textbook formulas
    c = len(m)
    n = sum(sum(r) for r in m)
    rows = [sum(m[i]) for i in range(c)]
    cols = [sum(m[i][j] for i in range(c)) for j in range(c)]
    diag = [m[i][i] for i in range(c)]
    po = sum(diag) / n
    pe = sum(rows[i] * cols[i] for i in range(c)) / n**2
    recalls = [diag[i] / rows[i] for i in range(c) if rows[i] > 0]
    present = [i for i in range(c) if rows[i] + cols[i] > 0]
    ious = [diag[i] / (rows[i] + cols[i] - diag[i]) for i in present]
    f1s = [2 * diag[i] / (rows[i] + cols[i]) for i in present]
    k = (po - pe) / (1 - pe) if pe != 1 else (1.0 if po == 1 else 0.0)
    return po, sum(recalls) / len(recalls), k, sum(ious) / len(ious), sum(f1s) / len(f1s)


def test_perfect_agreement():
    m = np.array([[2, 0], [0, 2]])
    assert (oa(m), aa(m), kappa(m), mean_iou(m), mean_f1(m)) == (1, 1, 1, 1, 1)


def test_constant_predictor():
    m = np.array([[2, 0], [2, 0]])
    assert oa(m) == 0.5
    assert kappa(m) == 0.0


def test_worked_example():
    m = np.array([[3, 1], [2, 4]])
    assert oa(m) == pytest.approx(0.7)
    assert aa(m) == pytest.approx((0.75 + 4 / 6) / 2)
    # p_e = (4*5 + 6*5) / 100 = 0.5
    assert kappa(m) == pytest.approx(0.4)
    assert mean_iou(m) == pytest.approx((3 / 6 + 4 / 7) / 2)
    assert mean_f1(m) == pytest.approx((6 / 9 + 8 / 11) / 2)


def test_confusion_diagonal_when_equal():
    t = np.array([[1, 2], [3, 1]])
    np.testing.assert_array_equal(confusion(t, t, 3).counts, np.diag([2, 1, 1]))


def test_unlabeled_truth_is_excluded():
    m = confusion(np.ones((2, 2), int), np.zeros((2, 2), int), 2)
    assert m.n == 0 and not m.counts.any()
    with pytest.raises(EmptyEvaluationError):
        oa(m)


def test_hand_built_scene_against_loop():
    truth = np.array([[1, 1, 0], [2, 3, 3], [0, 2, 1]])
    pred = np.array([[1, 2, 3], [2, 3, 1], [1, 2, 1]])
    np.testing.assert_array_equal(confusion(pred, truth, 3).counts, loop_confusion(pred, truth, 3))


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        confusion(np.ones((2, 2), int), np.ones((2, 3), int), 1)


def test_unlabeled_prediction_at_evaluated_pixel():
    with pytest.raises(DataError):
        confusion(np.array([[0]]), np.array([[1]]), 1)


def test_label_maps_accepted():
    t = LabelMap(np.array([[1, 2]]), 2)
    assert evaluate(t, t)["oa"] == 1.0


matrices = st.integers(2, 6).flatmap(
    lambda c: st.lists(st.lists(st.integers(0, 30), min_size=c, max_size=c), min_size=c, max_size=c)
).filter(lambda m: sum(map(sum, m)) > 0)


@settings(max_examples=200, deadline=None)
@given(matrices)
def test_statistics_match_formula_oracle(m):
    arr = np.array(m)
    got = (oa(arr), aa(arr), kappa(arr), mean_iou(arr), mean_f1(arr))
    assert got == pytest.approx(oracle_stats(m), abs=1e-12)
    assert -1 <= got[2] <= 1


@settings(max_examples=100, deadline=None)
@given(matrices, st.randoms())
def test_permutation_invariance(m, rnd):
    arr = np.array(m)
    perm = list(range(len(m)))
    rnd.shuffle(perm)
    p = arr[np.ix_(perm, perm)]
    for f in (oa, aa, kappa, mean_iou, mean_f1):
        assert f(p) == pytest.approx(f(arr), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(matrices)
def test_oa_is_row_weighted_mean_recall(m):
    arr = np.array(m)
    rec = np.nan_to_num(per_class_accuracy(arr))
    assert oa(arr) == pytest.approx(float((arr.sum(1) / arr.sum() * rec).sum()), abs=1e-12)


# sklearn warns on single-label draws, which are skipped below
@pytest.mark.filterwarnings("ignore")
@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(5, 60), st.integers(0, 2**31 - 1))
def test_kappa_agrees_with_sklearn(c, n, seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(1, c + 1, size=n)
    pred = np.where(rng.random(n) < 0.6, truth, rng.integers(1, c + 1, size=n))
    m = confusion(pred[None], truth[None], c)
    ref = cohen_kappa_score(truth, pred)
    if np.isnan(ref):
        return
    assert kappa(m) == pytest.approx(ref, abs=1e-10)


def test_kappa_one_iff_diagonal():
    assert kappa(np.diag([3, 0, 2])) == 1.0
    assert kappa(np.array([[3, 1], [0, 2]])) < 1.0
    assert kappa(np.array([[5]])) == 1.0


def test_class_absent_from_truth_but_predicted():
    m = np.array([[2, 1], [0, 0]])
    assert aa(m) == pytest.approx(2 / 3)
    assert mean_iou(m) == pytest.approx((2 / 3 + 0) / 2)


def test_table_layout():
    r1 = evaluate(np.array([[1, 2, 2]]), np.array([[1, 2, 1]]), 3)
    r2 = evaluate(np.array([[1, 1, 1]]), np.array([[1, 2, 1]]), 3)
    rows = table_rows([("Layer 2", r1), ("Layer 3", r2)])
    assert rows[0] == ["Class", "Layer 2", "Layer 3"]
    assert len(rows) == 1 + 3 + 5
    assert [r[0] for r in rows[-5:]] == ["Overall Accuracy (%)", "AA (%)", "Kappa Coefficient",
                                         "Mean IoU", "Mean F1 Score"]
    assert rows[1][1] == "50.00" and rows[3][1] == "-"
    assert rows[-5][1] == "66.67"
    assert len(rows[-3][1].split(".")[1]) == 4
    text = format_table([("Layer 2", r1)])
    assert "Mean F1 Score" in text
    assert table_csv([("Layer 2", r1)]).splitlines()[0] == "Class,Layer 2"
