import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fea_cncd.evalkit import (
    LedgerError,
    MetricsLedger,
    avg_accuracy,
    avg_discovery,
    avg_forgetting,
    confusion_csv,
    dump_metrics,
    evaluate_log,
    evaluate_predictions,
    fix_permutation,
    hungarian_assign,
    metrics_document,
)


# ---------------------------------------------------------------- assignment


def test_zero_diagonal_gives_identity():
    cost = np.ones((4, 4)) - np.eye(4)
    perm, total = hungarian_assign(cost)
    assert perm.tolist() == [0, 1, 2, 3] and total == 0.0


def test_two_by_two_example():
    perm, total = hungarian_assign([[1, 2], [3, 0]])
    assert perm.tolist() == [0, 1] and total == 1.0


def test_ties_break_lexicographically():
    perm, _ = hungarian_assign(np.zeros((3, 3)))
    assert perm.tolist() == [0, 1, 2]
    perm, _ = hungarian_assign([[1, 0, 0], [0, 1, 1], [0, 1, 1]])
    assert perm.tolist() == [1, 0, 2]


def test_assignment_rejects_bad_input():
    with pytest.raises(ValueError, match="square"):
        hungarian_assign(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        hungarian_assign(np.zeros((0, 0)))
    with pytest.raises(ValueError, match="finite"):
        hungarian_assign([[0.0, np.inf], [1.0, 0.0]])


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.booleans())
def test_assignment_matches_brute_force(n, seed, integer):
    rng = np.random.default_rng(seed)
    cost = rng.integers(0, 3, (n, n)).astype(float) if integer else rng.normal(size=(n, n))
    perm, total = hungarian_assign(cost)
    want_perm, want_total = oracles.brute_assign(cost.tolist())
    assert total == pytest.approx(want_total, abs=1e-9)
    assert perm.tolist() == want_perm


# ---------------------------------------------------------------- permutation fixing


def test_aligned_predictions_give_identity_mapping():
    perm = fix_permutation([0, 1, 1, 0], [10, 11, 11, 10], [10, 11], session=1)
    assert perm.mapping == (10, 11)


def test_swapped_predictions_give_swap():
    perm = fix_permutation([1, 1, 0, 0], [10, 10, 11, 11], [10, 11], session=2)
    assert perm.mapping == (11, 10)
    assert np.array_equal(perm([1, 1, 0, 0]), [10, 10, 11, 11])


def test_out_of_block_prediction_rejected():
    with pytest.raises(ValueError, match="outside the novel block"):
        fix_permutation([0, 2], [10, 11], [10, 11], session=1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_post_assignment_accuracy_is_best_over_all_relabelings(k, seed):
    rng = np.random.default_rng(seed)
    classes = list(range(20, 20 + k))
    truths = rng.choice(classes, 40)
    preds = rng.integers(0, k, 40)
    perm = fix_permutation(preds, truths, classes, session=1)
    got = np.mean(perm(preds) == truths)
    best = max(np.mean(np.asarray(p)[preds] == truths) for p in itertools.permutations(classes))
    assert got == pytest.approx(best)
    relabel = rng.permutation(k)
    again = fix_permutation(relabel[preds], truths, classes, session=1)
    assert np.mean(again(relabel[preds]) == truths) == pytest.approx(got)


# ---------------------------------------------------------------- metrics


def test_forgetting_example_and_errors():
    led = MetricsLedger.from_matrix([[90, np.nan], [80, 70]])
    assert avg_forgetting(led, 1) == 10.0
    with pytest.raises(LedgerError):
        avg_forgetting(led, 0)
    with pytest.raises(LedgerError):
        avg_forgetting(led, 2)


def test_discovery_example():
    led = MetricsLedger.from_matrix([[95, 0, 0], [90, 50, 0], [88, 70, 60]])
    assert avg_discovery(led, 2) == 65.0
    with pytest.raises(LedgerError):
        avg_discovery(led, 0)


def test_flat_columns_give_zero_forgetting():
    led = MetricsLedger.from_matrix([[80, 0, 0], [80, 60, 0], [80, 60, 50]])
    assert avg_forgetting(led, 2) == 0.0


def test_improving_columns_give_non_positive_forgetting():
    # improvement is reported as negative forgetting, not clipped
    led = MetricsLedger.from_matrix([[80, 0, 0], [85, 60, 0], [90, 61, 50]])
    assert avg_forgetting(led, 2) == -3.0


def test_three_session_hand_ledger():
    a = [[90.0], [85.0, 70.0], [80.0, 75.0, 60.0]]
    led = MetricsLedger()
    for row in a:
        led.append(row, 50.0)
    # F_2 = ((90 - 80) + (70 - 75)) / 2
    assert avg_forgetting(led, 2) == 2.5 == oracles.forgetting(a, 2)
    assert avg_discovery(led, 2) == 67.5 == oracles.discovery(a, 2)


def test_random_ledgers_match_oracles():
    rng = np.random.default_rng(0)
    for _ in range(50):
        T = int(rng.integers(1, 6))
        a = [list(rng.uniform(0, 100, t + 1)) for t in range(T + 1)]
        led = MetricsLedger()
        for row in a:
            led.append(row, 0.0)
        for t in range(1, T + 1):
            assert avg_forgetting(led, t) == pytest.approx(oracles.forgetting(a, t), abs=1e-12)
            assert avg_discovery(led, t) == pytest.approx(oracles.discovery(a, t), abs=1e-12)


def test_average_accuracy():
    led = MetricsLedger()
    led.append([90.0], 90.0)
    led.append([70.0, 70.0], 70.0)
    assert avg_accuracy(led) == 80.0
    const = MetricsLedger()
    for t in range(4):
        const.append([80.0] * (t + 1), 80.0)
    assert avg_accuracy(const, 3) == 80.0
    with pytest.raises(LedgerError):
        avg_accuracy(led, 2)


def test_ledger_shape_rules():
    led = MetricsLedger()
    with pytest.raises(LedgerError):
        led.append([1.0, 2.0], 1.0)
    led.append([50.0], 50.0)
    with pytest.raises(LedgerError):
        led.append([50.0, 101.0], 50.0)
    with pytest.raises(LedgerError):
        led.a(0, 1)
    assert np.isnan(led.matrix()[0, 0]) is np.False_


# ---------------------------------------------------------------- evaluation


def test_perfect_predictions_give_100s_and_diagonal_confusion():
    truths = np.array([0, 1, 2, 3, 3])
    ev = evaluate_predictions(truths, truths, [[0, 1], [2, 3]])
    assert ev.row == [100.0, 100.0] and ev.overall == 100.0
    assert np.array_equal(ev.confusion, np.diag([1, 1, 1, 2]))


def test_constant_prediction_counts():
    truths = np.array([0, 0, 1, 2, 2, 2])
    ev = evaluate_predictions(np.full(6, 2), truths, [[0, 1], [2]])
    assert ev.row == [0.0, 100.0]
    assert ev.overall == pytest.approx(50.0)
    assert ev.confusion[:, 2].tolist() == [2, 1, 3]


def test_row_matches_counting_oracle():
    rng = np.random.default_rng(3)
    groups = [[0, 1, 2], [3, 4], [5, 6]]
    truths = rng.integers(0, 7, 200)
    preds = rng.integers(0, 7, 200)
    ev = evaluate_predictions(preds, truths, groups)
    for j, g in enumerate(groups):
        idx = [i for i in range(200) if truths[i] in g]
        assert ev.row[j] == pytest.approx(100.0 * sum(preds[i] == truths[i] for i in idx) / len(idx))


def test_confusion_csv_layout():
    text = confusion_csv(np.array([[2, 0], [1, 3]]), [4, 9])
    assert text == ",4,9\n4,2,0\n9,1,3\n"


def _crafted_log():
    # session 0: 9 of 10 base samples right; session 1: 8 of 10 base right, novel swapped but consistent
    base_truth = [0] * 5 + [1] * 5
    rec0 = {"session": 0, "truths": base_truth, "predictions": [0] * 5 + [1] * 4 + [0]}
    truths1 = base_truth + [2] * 5 + [3] * 5
    preds1 = [0] * 5 + [1] * 3 + [0, 0] + [3] * 5 + [2] * 5
    rec1 = {"session": 1, "truths": truths1, "predictions": preds1, "novel_predictions": [1] * 5 + [0] * 5}
    return {"class_groups": [[0, 1], [2, 3]], "records": [rec0, rec1]}


def test_evaluate_log_reproduces_forgetting():
    ledger, evals = evaluate_log(_crafted_log())
    assert ledger.rows[0] == [90.0]
    assert ledger.rows[1] == [80.0, 100.0]
    assert avg_forgetting(ledger, 1) == 10.0
    assert ledger.permutations[1].mapping == (3, 2)


def test_metrics_document_schema_and_stability():
    ledger, _ = evaluate_log(_crafted_log())
    doc = metrics_document(ledger, "abc")
    assert set(doc) == {"run_id", "sessions", "a_matrix", "overall_accuracy", "forgetting", "discovery",
                        "F_T", "D_T", "average_accuracy", "permutations"}
    assert doc["F_T"] == 10.0 and doc["permutations"] == {"1": [3, 2]}
    assert dump_metrics(doc) == dump_metrics(metrics_document(evaluate_log(_crafted_log())[0], "abc"))
    assert json.loads(dump_metrics(doc))["D_T"] == 100.0
