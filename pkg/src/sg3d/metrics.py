"""Top-1 recall / mean recall over objects, predicates and triplets.

Recall here is top-1 accuracy over ground-truth-labeled instances; mean
recall averages per-class recalls over the classes present in the evaluation
split, which exposes long-tail behaviour.  The non-None protocol drops edges
whose GT predicate is the reserved None class from both numerator and
denominator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .rescore import SceneGraphPrediction
from .scene import SceneRecord


class MetricsError(ValueError):
    """No labeled instances available for the requested metric."""


NONE_PREDICATE = 0
HISTOGRAM_BINS = 10


@dataclass
class ClassRecall:
    correct: int
    total: int

    @property
    def recall(self) -> float:
        return self.correct / self.total


def _tally(gt: np.ndarray, pred: np.ndarray) -> tuple[float, float, dict[int, ClassRecall]]:
    per_class: dict[int, ClassRecall] = {}
    for g, p in zip(gt, pred):
        entry = per_class.setdefault(int(g), ClassRecall(0, 0))
        entry.total += 1
        entry.correct += int(g == p)
    # exact rational aggregation; floats only at the boundary
    recall = Fraction(sum(e.correct for e in per_class.values()), int(gt.size))
    mrecall = sum(Fraction(e.correct, e.total) for e in per_class.values()) \
        / len(per_class)
    return float(recall), float(mrecall), per_class


def eval_objects(gt_classes, pred_classes) -> tuple[float, float, dict[int, ClassRecall]]:
    """Recall, mean recall, and the per-class table over labeled nodes."""
    gt = np.asarray(gt_classes, dtype=np.int64)
    pred = np.asarray(pred_classes, dtype=np.int64)
    if gt.size == 0:
        raise MetricsError("no labeled nodes to evaluate")
    return _tally(gt, pred)


def eval_predicates(gt_predicates, pred_predicates,
                    exclude_none: bool = False) -> tuple[float, float, dict[int, ClassRecall]]:
    """As eval_objects over directed edges, optionally dropping GT-None edges."""
    gt = np.asarray(gt_predicates, dtype=np.int64)
    pred = np.asarray(pred_predicates, dtype=np.int64)
    if exclude_none:
        keep = gt != NONE_PREDICATE
        gt, pred = gt[keep], pred[keep]
    if gt.size == 0:
        raise MetricsError("no labeled edges to evaluate"
                           + (" after removing None edges" if exclude_none else ""))
    return _tally(gt, pred)


def eval_triplets(triplets, exclude_none: bool = False) -> float:
    """Fraction of GT edges whose subject class, object class and predicate
    argmaxes all match; ``triplets`` rows are
    (gt_subj, gt_obj, gt_pred, pred_subj, pred_obj, pred_pred)."""
    rows = [t for t in triplets if not (exclude_none and t[2] == NONE_PREDICATE)]
    if not rows:
        raise MetricsError("no labeled edges to evaluate"
                           + (" after removing None edges" if exclude_none else ""))
    correct = sum(1 for gs, go, gp, ps, po, pp in rows
                  if gs == ps and go == po and gp == pp)
    return float(Fraction(correct, len(rows)))


def quartiles(values) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25.0, 50.0, 75.0])
    return float(q1), float(med), float(q3)


def calibration_histogram(max_probs, correct) -> list[dict]:
    """Counts and accuracy over ten max-probability bins [x-0.1, x).

    Probabilities of exactly 1.0 land in the top bin so every instance is
    binned.
    """
    max_probs = np.asarray(max_probs, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    bins = []
    for b in range(HISTOGRAM_BINS):
        lo, hi = b / 10.0, (b + 1) / 10.0
        if b == HISTOGRAM_BINS - 1:
            mask = (max_probs >= lo) & (max_probs <= hi)
        else:
            mask = (max_probs >= lo) & (max_probs < hi)
        count = int(mask.sum())
        bins.append({
            "bin_low": lo,
            "bin_high": hi,
            "count": count,
            "accuracy": (float(correct[mask].sum() / count) if count else None),
        })
    return bins


def calibration_report(max_probs, correct, correct_probs_base,
                       correct_probs_refined) -> dict:
    """Confidence histogram plus correct-class probability quartiles."""
    out = {"histogram": calibration_histogram(max_probs, correct)}
    if len(correct_probs_base):
        out["quartiles_base"] = quartiles(correct_probs_base)
        out["quartiles_refined"] = quartiles(correct_probs_refined)
    else:
        out["quartiles_base"] = None
        out["quartiles_refined"] = None
    return out


@dataclass
class EvalReport:
    recall_rel: float
    recall_obj: float
    recall_pred: float
    mrecall_obj: float
    mrecall_pred: float
    per_class_obj: dict = field(default_factory=dict)
    per_class_pred: dict = field(default_factory=dict)
    confidence_histogram: list = field(default_factory=list)
    quartiles_base: tuple | None = None
    quartiles_refined: tuple | None = None
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "recall_rel": self.recall_rel,
            "recall_obj": self.recall_obj,
            "recall_pred": self.recall_pred,
            "mrecall_obj": self.mrecall_obj,
            "mrecall_pred": self.mrecall_pred,
            "per_class_obj": self.per_class_obj,
            "per_class_pred": self.per_class_pred,
            "confidence_histogram": self.confidence_histogram,
            "quartiles_base": self.quartiles_base,
            "quartiles_refined": self.quartiles_refined,
            "counts": self.counts,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def table(self) -> str:
        """Fixed-width summary of the five headline rates (percent)."""
        header = f"{'Rel':>8}{'Obj':>8}{'Pred':>8} |{'mObj':>8}{'mPred':>8}"
        row = (f"{100 * self.recall_rel:>8.2f}{100 * self.recall_obj:>8.2f}"
               f"{100 * self.recall_pred:>8.2f} |{100 * self.mrecall_obj:>8.2f}"
               f"{100 * self.mrecall_pred:>8.2f}")
        title = f"{'Recall%':>24} |{'mRecall%':>16}"
        return "\n".join([title, header, row])


def evaluate_predictions(predictions: list[SceneGraphPrediction],
                         scenes: list[SceneRecord],
                         exclude_none: bool = False) -> EvalReport:
    """Aggregate all metrics over aligned (prediction, ground truth) pairs."""
    gt_obj, pred_obj = [], []
    gt_pred, pred_pred = [], []
    triplet_rows = []
    node_max, node_correct = [], []
    probs_base, probs_refined = [], []
    class_names = scenes[0].classes if scenes else []
    pred_names = scenes[0].predicates if scenes else []
    for pred, scene in zip(predictions, scenes):
        index = {nid: k for k, nid in enumerate(pred.node_ids)}
        gt_class = {n.node_id: n.gt_class for n in scene.nodes}
        for nid, k in index.items():
            g = gt_class.get(nid)
            if g is None:
                continue
            p = int(pred.node_classes[k])
            gt_obj.append(g)
            pred_obj.append(p)
            node_max.append(float(pred.node_confidences[k]))
            node_correct.append(p == g)
            probs_base.append(float(pred.node_base[k, g]))
            probs_refined.append(float(pred.node_refined[k, g]))
        edge_pred = {pair: k for k, pair in enumerate(pred.edge_pairs)}
        for edge in scene.edges:
            if edge.gt_predicate is None:
                continue
            k = edge_pred.get((edge.src, edge.dst))
            if k is None:
                continue
            g_s, g_o = gt_class.get(edge.src), gt_class.get(edge.dst)
            r_hat = int(pred.edge_classes[k])
            gt_pred.append(edge.gt_predicate)
            pred_pred.append(r_hat)
            if g_s is not None and g_o is not None:
                triplet_rows.append((g_s, g_o, edge.gt_predicate,
                                     int(pred.node_classes[index[edge.src]]),
                                     int(pred.node_classes[index[edge.dst]]),
                                     r_hat))
    recall_obj, mrecall_obj, table_obj = eval_objects(gt_obj, pred_obj)
    recall_pred, mrecall_pred, table_pred = eval_predicates(
        gt_pred, pred_pred, exclude_none=exclude_none)
    recall_rel = eval_triplets(triplet_rows, exclude_none=exclude_none)
    calib = calibration_report(node_max, node_correct, probs_base, probs_refined)
    return EvalReport(
        recall_rel=recall_rel,
        recall_obj=recall_obj,
        recall_pred=recall_pred,
        mrecall_obj=mrecall_obj,
        mrecall_pred=mrecall_pred,
        per_class_obj={class_names[c]: {"correct": e.correct, "total": e.total,
                                        "recall": e.recall}
                       for c, e in sorted(table_obj.items())},
        per_class_pred={pred_names[c]: {"correct": e.correct, "total": e.total,
                                        "recall": e.recall}
                        for c, e in sorted(table_pred.items())},
        confidence_histogram=calib["histogram"],
        quartiles_base=calib["quartiles_base"],
        quartiles_refined=calib["quartiles_refined"],
        counts={"nodes": len(gt_obj), "edges": len(gt_pred), "triplets": len(triplet_rows)},
    )
