"""Recall/mRecall counting, the non-None protocol, and calibration reports.

The equivalence oracle recomputes every rate with Fraction arithmetic from
scratch, looping over instances one by one.
"""

from fractions import Fraction

import numpy as np
import pytest

from sg3d import metrics
from sg3d.metrics import (calibration_histogram, calibration_report,
                          eval_objects, eval_predicates, eval_triplets,
                          quartiles)

RNG = np.random.default_rng(41)


def test_all_correct_gives_unit_recalls():
    recall, mrecall, _ = eval_objects([0, 1, 2, 1], [0, 1, 2, 1])
    assert recall == 1.0 and mrecall == 1.0


def test_hand_counted_object_recalls():
    # class A: 3/4 correct, class B: 0/1
    gt = [0, 0, 0, 0, 1]
    pred = [0, 0, 0, 1, 0]
    recall, mrecall, table = eval_objects(gt, pred)
    assert recall == 0.6
    assert mrecall == 0.375
    assert table[0].correct == 3 and table[0].total == 4
    assert table[1].correct == 0 and table[1].total == 1


def test_absent_class_excluded_from_mrecall():
    recall, mrecall, table = eval_objects([0, 0], [0, 0])
    assert mrecall == 1.0
    assert set(table) == {0}


def test_no_labeled_nodes_rejected():
    with pytest.raises(metrics.MetricsError):
        eval_objects([], [])


def test_all_none_gt_with_exclude_none_rejected():
    with pytest.raises(metrics.MetricsError, match="None"):
        eval_predicates([0, 0, 0], [1, 0, 2], exclude_none=True)


def test_hand_counted_predicates():
    gt = [1, 1, 2, 2, 2]
    pred = [1, 2, 2, 2, 1]
    recall, mrecall, _ = eval_predicates(gt, pred)
    assert recall == 3 / 5
    assert mrecall == float((Fraction(1, 2) + Fraction(2, 3)) / 2)


def test_exclude_none_equivalent_when_no_none_labels():
    gt = [1, 2, 1, 2]
    pred = [1, 1, 2, 2]
    assert eval_predicates(gt, pred)[:2] == eval_predicates(gt, pred, True)[:2]


def test_exclude_none_drops_numerator_and_denominator():
    gt = [0, 1, 0, 2]
    pred = [0, 1, 1, 2]
    recall_all, _, _ = eval_predicates(gt, pred)
    recall_nn, _, _ = eval_predicates(gt, pred, exclude_none=True)
    assert recall_all == 3 / 4
    assert recall_nn == 1.0


def test_triplet_requires_all_three():
    rows = [(0, 1, 2, 0, 1, 2),   # all correct
            (0, 1, 2, 1, 1, 2),   # wrong subject class
            (0, 1, 2, 0, 2, 2),   # wrong object class
            (0, 1, 2, 0, 1, 1)]   # wrong predicate
    assert eval_triplets(rows) == 0.25
    assert eval_triplets(rows[:1]) == 1.0


def test_hand_counted_triplets_mixed():
    rows = [(0, 1, 1, 0, 1, 1),
            (1, 2, 2, 1, 2, 2),
            (2, 0, 1, 2, 0, 2),
            (0, 0, 2, 1, 0, 2)]
    assert eval_triplets(rows) == 0.5


def test_triplets_bounded_by_predicates_when_nodes_correct():
    for _ in range(20):
        n = int(RNG.integers(3, 12))
        gt_s = RNG.integers(0, 3, n)
        gt_o = RNG.integers(0, 3, n)
        gt_p = RNG.integers(0, 4, n)
        pred_p = RNG.integers(0, 4, n)
        rows = [(gt_s[i], gt_o[i], gt_p[i], gt_s[i], gt_o[i], pred_p[i])
                for i in range(n)]
        rel = eval_triplets(rows)
        pred_recall, _, _ = eval_predicates(gt_p, pred_p)
        assert rel <= pred_recall + 1e-15


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def test_single_bin_histogram():
    bins = calibration_histogram([0.95] * 7, [True] * 7)
    assert bins[9]["count"] == 7 and bins[9]["accuracy"] == 1.0
    assert sum(b["count"] for b in bins) == 7


def test_hand_binned_histogram():
    probs = [0.05, 0.15, 0.15, 0.55, 0.95, 1.0]
    correct = [False, True, False, True, True, True]
    bins = calibration_histogram(probs, correct)
    assert [b["count"] for b in bins] == [1, 2, 0, 0, 0, 1, 0, 0, 0, 2]
    assert bins[0]["accuracy"] == 0.0
    assert bins[1]["accuracy"] == 0.5
    assert bins[5]["accuracy"] == 1.0
    assert bins[9]["accuracy"] == 1.0  # probability 1.0 lands in the top bin
    assert bins[2]["accuracy"] is None
    assert sum(b["count"] for b in bins) == len(probs)


def test_quartiles_of_known_five_values():
    q1, med, q3 = quartiles([1.0, 2.0, 3.0, 4.0, 5.0])
    assert (q1, med, q3) == (2.0, 3.0, 4.0)


def test_calibration_report_contains_both_quartile_sets():
    report = calibration_report([0.9, 0.4], [True, False], [0.9, 0.2], [0.95, 0.3])
    assert report["quartiles_base"][1] == pytest.approx(0.55)
    assert report["quartiles_refined"][1] == pytest.approx(0.625)


# ---------------------------------------------------------------------------
# brute-force oracle equivalence
# ---------------------------------------------------------------------------

def oracle_rates(gt, pred):
    """Instance-by-instance Fraction recomputation of recall and mrecall."""
    totals, corrects = {}, {}
    for g, p in zip(gt, pred):
        totals[g] = totals.get(g, 0) + 1
        corrects[g] = corrects.get(g, 0) + (1 if g == p else 0)
    recall = Fraction(sum(corrects.values()), len(gt))
    mrecall = sum(Fraction(corrects[c], totals[c]) for c in totals) / len(totals)
    return recall, mrecall


def random_graph(rng):
    n_nodes = int(rng.integers(1, 13))
    n_edges = int(rng.integers(0, max(1, n_nodes * (n_nodes - 1) // 2)))
    gt_cls = rng.integers(0, 4, n_nodes)
    pred_cls = np.where(rng.random(n_nodes) < 0.6, gt_cls, rng.integers(0, 4, n_nodes))
    edges = []
    for _ in range(n_edges):
        s, o = rng.integers(0, n_nodes, 2)
        if s == o:
            continue
        gt_p = int(rng.integers(0, 5))
        pred_p = gt_p if rng.random() < 0.5 else int(rng.integers(0, 5))
        edges.append((int(gt_cls[s]), int(gt_cls[o]), gt_p,
                      int(pred_cls[s]), int(pred_cls[o]), pred_p))
    return gt_cls, pred_cls, edges


def test_metrics_equal_brute_force_on_random_graphs():
    rng = np.random.default_rng(2024)
    checked_rel = 0
    for _ in range(50):
        gt_cls, pred_cls, edges = random_graph(rng)
        recall, mrecall, _ = eval_objects(gt_cls, pred_cls)
        o_recall, o_mrecall = oracle_rates(list(gt_cls), list(pred_cls))
        assert recall == float(o_recall)
        assert mrecall == float(o_mrecall)

        if edges:
            gt_p = [e[2] for e in edges]
            pred_p = [e[5] for e in edges]
            p_recall, p_mrecall, _ = eval_predicates(gt_p, pred_p)
            op_recall, op_mrecall = oracle_rates(gt_p, pred_p)
            assert p_recall == float(op_recall)
            assert p_mrecall == float(op_mrecall)

            rel = eval_triplets(edges)
            o_rel = Fraction(sum(1 for gs, go, gp, ps, po, pp in edges
                                 if gs == ps and go == po and gp == pp), len(edges))
            assert rel == float(o_rel)
            checked_rel += 1
    assert checked_rel >= 30


def test_recall_is_count_weighted_mean_of_per_class_recalls():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, 5, 40)
        pred = rng.integers(0, 5, 40)
        recall, _, table = eval_objects(gt, pred)
        weighted = sum(e.recall * e.total for e in table.values()) / 40
        assert recall == pytest.approx(weighted, abs=1e-15)
