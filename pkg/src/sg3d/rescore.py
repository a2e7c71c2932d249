"""Confidence rescoring from training-set co-occurrence statistics.

Counts of (subject class, predicate, object class) over labeled directed
edges yield three smoothed conditional tables.  At inference, node and edge
softmax outputs are blended with inverse-softmax-transformed conditional
columns, weighted by each prediction's own confidence: confident predictions
keep their logits, uncertain ones lean on the priors of their neighborhood.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import SceneRecord


class StatsError(ValueError):
    """Co-occurrence statistics unavailable or malformed."""


class VocabularyMismatchError(ValueError):
    """Statistics were computed for a different class/predicate vocabulary."""


@dataclass(eq=False)
class CooccurrenceStats:
    classes: list[str]
    predicates: list[str]
    epsilon: float                  # add-epsilon smoothing before normalization
    node_pair: np.ndarray           # [C, C] counts, row = subject class, col = object class
    pred_given_subj: np.ndarray     # [P, C] counts of (predicate, subject class)
    pred_given_obj: np.ndarray      # [P, C] counts of (predicate, object class)
    triplet: np.ndarray             # [C, P, C] joint counts backing the marginals

    def equals(self, other: "CooccurrenceStats") -> bool:
        return (self.classes == other.classes
                and self.predicates == other.predicates
                and self.epsilon == other.epsilon
                and np.array_equal(self.node_pair, other.node_pair)
                and np.array_equal(self.pred_given_subj, other.pred_given_subj)
                and np.array_equal(self.pred_given_obj, other.pred_given_obj)
                and np.array_equal(self.triplet, other.triplet))

    def check_vocab(self, classes: list[str], predicates: list[str]) -> None:
        if self.classes != classes or self.predicates != predicates:
            raise VocabularyMismatchError(
                "statistics vocabulary does not match the corpus vocabulary")


def compute_stats(scenes: list[SceneRecord], epsilon: float = 1.0) -> CooccurrenceStats:
    """Tally directed labeled edges of a training corpus.

    An edge contributes when it carries a predicate label and both endpoints
    carry class labels; the three marginal tables are derived from one joint
    triplet count so they stay mutually consistent.
    """
    if not scenes:
        raise StatsError("empty corpus")
    classes, predicates = scenes[0].classes, scenes[0].predicates
    c, p = len(classes), len(predicates)
    triplet = np.zeros((c, p, c), dtype=np.int64)
    for scene in scenes:
        if scene.classes != classes or scene.predicates != predicates:
            raise VocabularyMismatchError(
                f"scene '{scene.scene_id}' vocabulary differs within the corpus")
        labels = {n.node_id: n.gt_class for n in scene.nodes}
        for edge in scene.edges:
            if edge.gt_predicate is None:
                continue
            o_i, o_j = labels[edge.src], labels[edge.dst]
            if o_i is None or o_j is None:
                continue
            triplet[o_i, edge.gt_predicate, o_j] += 1
    if triplet.sum() == 0:
        raise StatsError("corpus has no labeled edges")
    return _from_triplet(classes, predicates, epsilon, triplet)


def _from_triplet(classes, predicates, epsilon, triplet: np.ndarray) -> CooccurrenceStats:
    return CooccurrenceStats(
        classes=list(classes),
        predicates=list(predicates),
        epsilon=float(epsilon),
        node_pair=triplet.sum(axis=1),
        pred_given_subj=triplet.sum(axis=2).T,
        pred_given_obj=triplet.sum(axis=0),
        triplet=triplet,
    )


CONDITIONAL_KINDS = ("node_pair", "pred_given_subj", "pred_given_obj")


def conditional(stats: CooccurrenceStats, kind: str) -> np.ndarray:
    """Column-stochastic conditional table; columns index the conditioning class."""
    if kind not in CONDITIONAL_KINDS:
        raise StatsError(f"unknown conditional kind '{kind}'")
    counts = getattr(stats, kind).astype(np.float64) + stats.epsilon
    sums = counts.sum(axis=0, keepdims=True)
    if (sums <= 0).any():
        raise StatsError("conditional requires a positive count mass per column "
                         "(set epsilon > 0 when whole columns are empty)")
    return counts / sums


def inverse_softmax(p: np.ndarray) -> np.ndarray:
    """Mean-centred log: the minimum-norm logit preimage of softmax."""
    p = np.asarray(p, dtype=np.float64)
    if (p <= 0).any():
        raise StatsError("inverse_softmax requires strictly positive probabilities")
    logp = np.log(p)
    return logp - logp.mean(axis=0, keepdims=True) if p.ndim > 1 else logp - logp.mean()


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def rescore_nodes(node_logits: np.ndarray, neighbors: list[list[int]],
                  stats: CooccurrenceStats, fixed_alpha: float | None = None,
                  neighbor_mode: str = "argmax") -> tuple[np.ndarray, np.ndarray]:
    """Blend node logits with neighbor-conditioned class priors.

    Returns (base, refined) distributions, both row-stochastic.  Neighbor
    evidence uses base-pass confidences; ``neighbor_mode`` selects the hard
    argmax column (default) or the expectation over the neighbor's full base
    distribution.
    """
    node_logits = np.asarray(node_logits, dtype=np.float64)
    m, c = node_logits.shape
    if c != len(stats.classes):
        raise VocabularyMismatchError(
            f"logits have {c} classes, statistics {len(stats.classes)}")
    if neighbor_mode not in ("argmax", "expect"):
        raise StatsError(f"unknown neighbor_mode '{neighbor_mode}'")
    base = _softmax_rows(node_logits)
    alpha = base.max(axis=1) if fixed_alpha is None else np.full(m, float(fixed_alpha))
    argmax = base.argmax(axis=1)
    cond = conditional(stats, "node_pair")
    gamma_cols = inverse_softmax(cond)  # column k = gamma of the class-k conditional
    refined_logits = np.empty_like(node_logits)
    for i in range(m):
        prior = np.zeros(c)
        for j in neighbors[i]:
            if neighbor_mode == "argmax":
                col = gamma_cols[:, argmax[j]]
            else:
                col = inverse_softmax(cond @ base[j])
            prior += alpha[j] * col
        refined_logits[i] = alpha[i] * node_logits[i] + (1.0 - alpha[i]) * prior
    return base, _softmax_rows(refined_logits)


def rescore_edges(edge_logits: np.ndarray, edge_index: list[tuple[int, int]],
                  node_refined: np.ndarray, stats: CooccurrenceStats,
                  fixed_alpha: float | None = None,
                  combine: str = "product") -> tuple[np.ndarray, np.ndarray]:
    """Blend edge logits with class-conditioned predicate priors.

    Node classes and confidences come from the already-refined node
    distributions.  ``combine`` joins the subject- and object-conditioned
    prior terms elementwise by product (default) or by sum.
    """
    edge_logits = np.asarray(edge_logits, dtype=np.float64)
    e, p = edge_logits.shape
    if p != len(stats.predicates):
        raise VocabularyMismatchError(
            f"logits have {p} predicates, statistics {len(stats.predicates)}")
    if combine not in ("product", "sum"):
        raise StatsError(f"unknown edge combine mode '{combine}'")
    base = _softmax_rows(edge_logits)
    alpha_e = base.max(axis=1) if fixed_alpha is None else np.full(e, float(fixed_alpha))
    node_cls = node_refined.argmax(axis=1)
    node_alpha = (node_refined.max(axis=1) if fixed_alpha is None
                  else np.full(node_refined.shape[0], float(fixed_alpha)))
    gamma_subj = inverse_softmax(conditional(stats, "pred_given_subj"))
    gamma_obj = inverse_softmax(conditional(stats, "pred_given_obj"))
    refined_logits = np.empty_like(edge_logits)
    for k, (i, j) in enumerate(edge_index):
        term_i = node_alpha[i] * gamma_subj[:, node_cls[i]]
        term_j = node_alpha[j] * gamma_obj[:, node_cls[j]]
        prior = term_i * term_j if combine == "product" else term_i + term_j
        refined_logits[k] = alpha_e[k] * edge_logits[k] + (1.0 - alpha_e[k]) * prior
    return base, _softmax_rows(refined_logits)


def ablate_stats(stats: CooccurrenceStats, drop_top_fraction: float) -> CooccurrenceStats:
    """Zero the most frequent triplets until the target count mass is removed.

    Triplets are dropped in descending-count order (ties by flat index) until
    the removed mass reaches ``drop_top_fraction`` of the total; the marginal
    tables are rebuilt from the reduced joint counts.
    """
    if not 0.0 <= drop_top_fraction < 1.0:
        raise StatsError(f"drop_top_fraction must be in [0, 1), got {drop_top_fraction}")
    triplet = stats.triplet.copy()
    total = int(triplet.sum())
    target = drop_top_fraction * total
    if target > 0:
        flat = triplet.reshape(-1)
        order = np.argsort(-flat, kind="stable")
        removed = 0
        for idx in order:
            if removed >= target or flat[idx] == 0:
                break
            removed += int(flat[idx])
            flat[idx] = 0
    return _from_triplet(stats.classes, stats.predicates, stats.epsilon, triplet)


# ---------------------------------------------------------------------------
# stats files
# ---------------------------------------------------------------------------

def save_stats(stats: CooccurrenceStats, path) -> None:
    path = Path(path)
    doc = {
        "classes": stats.classes,
        "predicates": stats.predicates,
        "epsilon": stats.epsilon,
        "node_pair": stats.node_pair.tolist(),
        "pred_given_subj": stats.pred_given_subj.tolist(),
        "pred_given_obj": stats.pred_given_obj.tolist(),
        "triplet": stats.triplet.tolist(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_stats(path) -> CooccurrenceStats:
    path = Path(path)
    if not path.exists():
        raise StatsError(f"stats file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise StatsError(f"{path}: invalid JSON: {exc}") from exc
    try:
        c, p = len(doc["classes"]), len(doc["predicates"])
        stats = CooccurrenceStats(
            classes=list(doc["classes"]),
            predicates=list(doc["predicates"]),
            epsilon=float(doc["epsilon"]),
            node_pair=np.asarray(doc["node_pair"], dtype=np.int64),
            pred_given_subj=np.asarray(doc["pred_given_subj"], dtype=np.int64),
            pred_given_obj=np.asarray(doc["pred_given_obj"], dtype=np.int64),
            triplet=np.asarray(doc["triplet"], dtype=np.int64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise StatsError(f"{path}: malformed stats file: {exc}") from exc
    for name, shape in (("node_pair", (c, c)), ("pred_given_subj", (p, c)),
                        ("pred_given_obj", (p, c)), ("triplet", (c, p, c))):
        if getattr(stats, name).shape != shape:
            raise StatsError(f"{path}: table '{name}' has shape "
                             f"{getattr(stats, name).shape}, expected {shape}")
    if (stats.triplet < 0).any():
        raise StatsError(f"{path}: negative counts")
    return stats


# ---------------------------------------------------------------------------
# per-scene prediction container
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SceneGraphPrediction:
    """Node and edge distributions for one scene, before and after rescoring.

    When rescoring is disabled the refined arrays alias the base arrays;
    argmax classes and confidences always reflect the final distributions.
    """

    scene_id: str
    node_ids: list[str]
    node_base: np.ndarray          # [M, C]
    node_refined: np.ndarray       # [M, C]
    node_classes: np.ndarray       # [M] argmax of the final distribution
    node_confidences: np.ndarray   # [M] max of the final distribution
    edge_pairs: list[tuple[str, str]] = field(default_factory=list)
    edge_base: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    edge_refined: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    edge_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    edge_confidences: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cr_applied: bool = False
