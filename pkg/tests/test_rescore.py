"""Co-occurrence counting, conditionals, inverse softmax, and rescoring."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sg3d import rescore
from sg3d.rescore import (CooccurrenceStats, ablate_stats, compute_stats,
                          conditional, inverse_softmax, load_stats,
                          rescore_edges, rescore_nodes, save_stats)
from sg3d.scene import EdgeInstance
from tests.test_scene import make_node, make_scene

RNG = np.random.default_rng(77)


def stats_from_tables(node_pair=None, pred_subj=None, pred_obj=None, triplet=None,
                      classes=2, predicates=2, epsilon=1.0):
    c, p = classes, predicates
    if triplet is None:
        triplet = np.zeros((c, p, c), dtype=np.int64)
    return CooccurrenceStats(
        classes=[f"c{i}" for i in range(c)],
        predicates=["none"] + [f"r{i}" for i in range(1, p)],
        epsilon=epsilon,
        node_pair=np.asarray(node_pair if node_pair is not None
                             else triplet.sum(axis=1), dtype=np.int64),
        pred_given_subj=np.asarray(pred_subj if pred_subj is not None
                                   else triplet.sum(axis=2).T, dtype=np.int64),
        pred_given_obj=np.asarray(pred_obj if pred_obj is not None
                                  else triplet.sum(axis=0), dtype=np.int64),
        triplet=np.asarray(triplet, dtype=np.int64),
    )


def two_node_scene(cls_a, cls_b, predicate, scene_id="s"):
    nodes = [make_node("n0", centroid=(0, 0, 0), gt_class=cls_a),
             make_node("n1", centroid=(1, 0, 0), gt_class=cls_b)]
    scene = make_scene(nodes, edges=[EdgeInstance("n0", "n1", predicate)],
                       scene_id=scene_id)
    return scene


def test_single_edge_gives_three_unit_counts():
    stats = compute_stats([two_node_scene(2, 1, 1)])
    assert stats.node_pair[2, 1] == 1 and stats.node_pair.sum() == 1
    assert stats.pred_given_subj[1, 2] == 1 and stats.pred_given_subj.sum() == 1
    assert stats.pred_given_obj[1, 1] == 1 and stats.pred_given_obj.sum() == 1


def test_two_scene_hand_tally():
    s1 = two_node_scene(0, 1, 1, "a")
    s1.edges.append(EdgeInstance("n1", "n0", 0))
    s2 = two_node_scene(1, 1, 2, "b")
    stats = compute_stats([s1, s2])
    expected_pairs = np.zeros((3, 3), dtype=int)
    expected_pairs[0, 1] += 1  # a: n0->n1
    expected_pairs[1, 0] += 1  # a: n1->n0
    expected_pairs[1, 1] += 1  # b: n0->n1
    assert np.array_equal(stats.node_pair, expected_pairs)
    assert stats.pred_given_subj[1, 0] == 1
    assert stats.pred_given_subj[0, 1] == 1
    assert stats.pred_given_subj[2, 1] == 1
    assert stats.pred_given_obj[1, 1] == 1
    assert stats.pred_given_obj[0, 0] == 1
    assert stats.pred_given_obj[2, 1] == 1


def test_unlabeled_corpus_rejected():
    with pytest.raises(rescore.StatsError, match="no labeled edges"):
        scene = two_node_scene(0, 1, None)
        compute_stats([scene])
    with pytest.raises(rescore.StatsError, match="empty"):
        compute_stats([])


# ---------------------------------------------------------------------------
# conditionals and inverse softmax
# ---------------------------------------------------------------------------

def test_conditional_identity_columns():
    stats = stats_from_tables(node_pair=[[2, 0], [0, 2]], epsilon=0.0)
    assert np.allclose(conditional(stats, "node_pair"), np.eye(2), atol=0)


def test_conditional_uniform_columns():
    stats = stats_from_tables(node_pair=[[5, 5], [5, 5]], epsilon=0.0)
    assert np.allclose(conditional(stats, "node_pair"), 0.5)


def test_conditional_hand_normalization():
    stats = stats_from_tables(node_pair=[[3, 1], [1, 3]], epsilon=1.0)
    expected = np.array([[4 / 6, 2 / 6], [2 / 6, 4 / 6]])
    assert np.allclose(conditional(stats, "node_pair"), expected, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=9, max_size=9))
def test_conditional_columns_stochastic(counts):
    triplet = np.zeros((3, 2, 3), dtype=np.int64)
    triplet[:, 1, :] = np.asarray(counts).reshape(3, 3)
    stats = stats_from_tables(triplet=triplet, classes=3, epsilon=1.0)
    for kind in rescore.CONDITIONAL_KINDS:
        cols = conditional(stats, kind)
        assert np.abs(cols.sum(axis=0) - 1.0).max() < 1e-12
        assert (cols > 0).all()


def test_inverse_softmax_uniform_is_zero():
    assert np.array_equal(inverse_softmax(np.full(5, 0.2)), np.zeros(5))


def test_inverse_softmax_is_right_inverse():
    for _ in range(200):
        p = RNG.dirichlet(np.ones(6))
        if (p < 1e-12).any():
            continue
        z = inverse_softmax(p)
        back = np.exp(z - z.max())
        back /= back.sum()
        assert np.abs(back - p).max() < 1e-12


def test_inverse_softmax_hand_value():
    z = inverse_softmax(np.array([0.8, 0.2]))
    assert abs(z[0] - math.log(2)) < 1e-12
    assert abs(z[1] + math.log(2)) < 1e-12
    assert abs(z[0] - 0.6931471805599453) < 1e-12


def test_inverse_softmax_rejects_zeros():
    with pytest.raises(rescore.StatsError):
        inverse_softmax(np.array([1.0, 0.0]))


# ---------------------------------------------------------------------------
# node rescoring
# ---------------------------------------------------------------------------

def test_alpha_one_reproduces_base_exactly():
    stats = stats_from_tables(node_pair=[[3, 1], [1, 3]])
    logits = RNG.normal(size=(4, 2))
    base, refined = rescore_nodes(logits, [[1], [0], [3], [2]], stats, fixed_alpha=1.0)
    assert np.array_equal(base, refined)


def test_isolated_node_argmax_invariance():
    stats = stats_from_tables(node_pair=[[3, 1], [1, 3]])
    for _ in range(200):
        logits = RNG.normal(size=(1, 2)) * 3
        base, refined = rescore_nodes(logits, [[]], stats)
        assert base.argmax() == refined.argmax()


def test_node_rescore_matches_hand_formula():
    # stats whose smoothed conditional column for class 1 is exactly [0.1, 0.9]
    stats = stats_from_tables(node_pair=[[5, 1], [5, 9]], epsilon=0.0)
    cond = conditional(stats, "node_pair")
    assert np.allclose(cond[:, 1], [0.1, 0.9])

    target_logits = np.array([0.2, 0.0])
    neighbor_logits = np.log([0.1, 0.9])  # softmax gives [0.1, 0.9]: argmax 1, alpha 0.9
    base, refined = rescore_nodes(np.stack([target_logits, neighbor_logits]),
                                  [[1], [0]], stats)
    assert np.isclose(base[1].max(), 0.9)

    # scalar evaluation of the blend for node 0
    alpha0 = base[0].max()
    gamma_col = np.log(cond[:, 1]) - np.log(cond[:, 1]).mean()
    z = alpha0 * target_logits + (1 - alpha0) * (0.9 * gamma_col)
    expected = np.exp(z - z.max())
    expected /= expected.sum()
    assert np.allclose(refined[0], expected, atol=1e-12)
    assert refined[0][1] > base[0][1]  # correct-class probability strictly increases


def test_node_rescore_expectation_mode_runs():
    stats = stats_from_tables(node_pair=[[6, 1], [2, 7]])
    logits = RNG.normal(size=(2, 2))
    base, refined = rescore_nodes(logits, [[1], [0]], stats, neighbor_mode="expect")
    assert np.allclose(refined.sum(axis=1), 1.0, atol=1e-9)
    assert (refined > 0).all()


def test_vocab_mismatch_rejected():
    stats = stats_from_tables(node_pair=[[1, 0], [0, 1]])
    with pytest.raises(rescore.VocabularyMismatchError):
        rescore_nodes(np.zeros((1, 5)), [[]], stats)


# ---------------------------------------------------------------------------
# edge rescoring
# ---------------------------------------------------------------------------

def hand_stats_p3():
    # 3 predicates x 2 classes with distinctive columns
    triplet = np.zeros((2, 3, 2), dtype=np.int64)
    triplet[0, 0, 0] = 8
    triplet[0, 1, 1] = 6
    triplet[1, 2, 0] = 4
    triplet[1, 1, 0] = 2
    return stats_from_tables(triplet=triplet, classes=2, predicates=3)


def test_edge_alpha_one_reproduces_base():
    stats = hand_stats_p3()
    logits = RNG.normal(size=(2, 3))
    node_refined = np.array([[0.8, 0.2], [0.3, 0.7]])
    base, refined = rescore_edges(logits, [(0, 1), (1, 0)], node_refined, stats,
                                  fixed_alpha=1.0)
    assert np.array_equal(base, refined)


def test_edge_uniform_priors_leave_argmax():
    triplet = np.ones((2, 3, 2), dtype=np.int64)  # all conditionals uniform
    stats = stats_from_tables(triplet=triplet, classes=2, predicates=3)
    logits = RNG.normal(size=(4, 3)) * 2
    node_refined = np.array([[0.9, 0.1], [0.2, 0.8]])
    base, refined = rescore_edges(logits, [(0, 1)] * 4, node_refined, stats)
    assert np.array_equal(base.argmax(axis=1), refined.argmax(axis=1))


@pytest.mark.parametrize("combine", ["product", "sum"])
def test_edge_rescore_matches_hand_formula(combine):
    stats = hand_stats_p3()
    g_subj = inverse_softmax(conditional(stats, "pred_given_subj"))
    g_obj = inverse_softmax(conditional(stats, "pred_given_obj"))
    logits = np.array([[0.5, -0.2, 0.1]])
    node_refined = np.array([[0.75, 0.25], [0.4, 0.6]])
    base, refined = rescore_edges(logits, [(0, 1)], node_refined, stats, combine=combine)

    alpha_e = base[0].max()
    a_i, c_i = 0.75, 0
    a_j, c_j = 0.6, 1
    term_i = a_i * g_subj[:, c_i]
    term_j = a_j * g_obj[:, c_j]
    prior = term_i * term_j if combine == "product" else term_i + term_j
    z = alpha_e * logits[0] + (1 - alpha_e) * prior
    expected = np.exp(z - z.max())
    expected /= expected.sum()
    assert np.allclose(refined[0], expected, atol=1e-12)


def test_refined_distributions_positive_and_normalized():
    stats = hand_stats_p3()
    node_logits = RNG.normal(size=(6, 2)) * 2
    neighbors = [[1, 2], [0], [0], [4], [3], []]
    base, refined = rescore_nodes(node_logits, neighbors, stats)
    for dist in (base, refined):
        assert np.abs(dist.sum(axis=1) - 1.0).max() < 1e-9
        assert (dist > 0).all()
    edge_logits = RNG.normal(size=(3, 3))
    _, e_ref = rescore_edges(edge_logits, [(0, 1), (2, 3), (4, 5)], refined, stats)
    assert np.abs(e_ref.sum(axis=1) - 1.0).max() < 1e-9
    assert (e_ref > 0).all()


# ---------------------------------------------------------------------------
# ablation and persistence
# ---------------------------------------------------------------------------

def test_ablate_zero_fraction_is_identity():
    stats = hand_stats_p3()
    assert ablate_stats(stats, 0.0).equals(stats)


def test_ablate_half_matches_hand_selection():
    stats = hand_stats_p3()  # counts 8, 6, 4, 2 -> total 20; target mass 10 -> drop 8, 6
    out = ablate_stats(stats, 0.5)
    assert out.triplet[0, 0, 0] == 0
    assert out.triplet[0, 1, 1] == 0
    assert out.triplet[1, 2, 0] == 4
    assert out.triplet[1, 1, 0] == 2
    assert out.node_pair.sum() == 6


def test_ablate_extreme_fraction_keeps_valid_conditionals():
    stats = hand_stats_p3()
    out = ablate_stats(stats, 0.999)
    assert out.triplet.sum() == 0  # dropping 8, 6, 4 is still < 0.999 * 20 = 19.98
    for kind in rescore.CONDITIONAL_KINDS:
        cols = conditional(out, kind)
        assert np.abs(cols.sum(axis=0) - 1.0).max() < 1e-12


def test_ablate_fraction_out_of_range():
    stats = hand_stats_p3()
    for bad in (-0.1, 1.0, 1.5):
        with pytest.raises(rescore.StatsError):
            ablate_stats(stats, bad)


def test_stats_roundtrip(tmp_path):
    stats = hand_stats_p3()
    save_stats(stats, tmp_path / "stats.json")
    assert load_stats(tmp_path / "stats.json").equals(stats)


def test_stats_roundtrip_from_corpus(tmp_path):
    stats = compute_stats([two_node_scene(0, 1, 2), two_node_scene(2, 2, 1, "s2")])
    save_stats(stats, tmp_path / "s.json")
    assert load_stats(tmp_path / "s.json").equals(stats)


def test_load_stats_missing_path():
    with pytest.raises(rescore.StatsError, match="not found"):
        load_stats("/nonexistent/stats.json")


# ---------------------------------------------------------------------------
# directional effect on low-confidence instances
# ---------------------------------------------------------------------------

def test_low_confidence_instances_gain_probability_with_informative_priors():
    # paired-class world: class c always co-occurs with (c+1) % C; noisy logits
    c = 6
    for seed in range(5):
        rng = np.random.default_rng(seed)
        triplet = np.zeros((c, 2, c), dtype=np.int64)
        for k in range(c):
            triplet[k, 1, (k + 1) % c] = 50
        stats = stats_from_tables(triplet=triplet, classes=c, predicates=2)

        base_probs, refined_probs = [], []
        for _ in range(150):
            true = int(rng.integers(c))
            partner = (true + 1) % c
            logits = rng.normal(0, 1.2, size=(2, c))
            logits[0, true] += 1.0
            logits[1, partner] += 2.5  # the neighbor is usually confident
            base, refined = rescore_nodes(logits, [[1], [0]], stats)
            if base[0].max() < 0.5:
                base_probs.append(base[0, true])
                refined_probs.append(refined[0, true])
        assert len(base_probs) > 20
        assert np.mean(refined_probs) >= np.mean(base_probs), f"seed {seed}"
