"""Scene-level orchestration: feature prep, forward pass, prediction, evaluation.

Scenes are prepared once into index-level constants (sorted node order,
aggregated view features, centred point sets, edge descriptors, label
arrays); the prepared form is what training loops and evaluation iterate
over.  Prediction runs the full stack and optionally applies confidence
rescoring; corpus evaluation is a pure map over scenes and honours the
SSG_THREADS worker-pool cap.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import features as feat
from . import gnn, metrics, nn, rescore
from .autodiff import Value
from .model import ModelParams, predict_logits
from .rescore import CooccurrenceStats, SceneGraphPrediction
from .scene import SceneRecord


@dataclass
class InferenceConfig:
    """Knobs that affect a single forward/rescore pass."""

    cr_enabled: bool = True
    fixed_alpha: float | None = None
    cr_edge_combine: str = "product"
    cr_neighbor_mode: str = "argmax"
    neighbor_residual: bool = True
    geo_max_points: int = 128
    lenient_views: bool = False

    def __post_init__(self):
        if self.fixed_alpha is not None and not 0.0 < self.fixed_alpha <= 1.0:
            raise ValueError(f"fixed_alpha must be in (0, 1], got {self.fixed_alpha}")


@dataclass
class ScenePrep:
    """Constant per-scene arrays in canonical (sorted node_id) order."""

    scene_id: str
    node_ids: list[str]
    v0: np.ndarray                   # [M, D] aggregated multi-view features
    spat_attrs: np.ndarray           # [M, 6]
    points: np.ndarray               # concatenated centred points, [sum(N), 3]
    point_slices: list[tuple[int, int]]
    structure: gnn.GraphStructure
    descriptors: np.ndarray          # [E, 11]
    node_labels: np.ndarray          # [M], -1 when unlabeled
    edge_labels: np.ndarray          # [E], -1 when unlabeled
    edge_pairs: list[tuple[str, str]] = field(default_factory=list)


def _subsample(points: np.ndarray, limit: int) -> np.ndarray:
    if limit and points.shape[0] > limit:
        idx = np.linspace(0, points.shape[0] - 1, limit).astype(np.intp)
        return points[idx]
    return points


def prepare_scene(scene: SceneRecord, cfg: InferenceConfig) -> ScenePrep:
    order = sorted(range(len(scene.nodes)), key=lambda i: scene.nodes[i].node_id)
    nodes = [scene.nodes[i] for i in order]
    node_ids = [n.node_id for n in nodes]
    index = {nid: k for k, nid in enumerate(node_ids)}

    v0_rows, attr_rows, point_blocks, slices = [], [], [], []
    offset = 0
    for node in nodes:
        agg = feat.aggregate_multiview(node, strict=not cfg.lenient_views)
        if agg.size == 0:
            agg = np.zeros(scene.feature_dim)
        v0_rows.append(agg)
        attr_rows.append(feat.SpatialAttributes.from_box(node.bbox).as_vector())
        pts = feat.center_points(_subsample(node.points, cfg.geo_max_points))
        point_blocks.append(pts)
        slices.append((offset, offset + pts.shape[0]))
        offset += pts.shape[0]

    edges = sorted(scene.edges, key=lambda e: (e.src, e.dst))
    edge_index = [(index[e.src], index[e.dst]) for e in edges]
    descriptors = (np.stack([gnn.edge_descriptor(nodes[s].bbox, nodes[d].bbox)
                             for s, d in edge_index])
                   if edges else np.zeros((0, gnn.DESCRIPTOR_DIM)))
    return ScenePrep(
        scene_id=scene.scene_id,
        node_ids=node_ids,
        v0=np.stack(v0_rows),
        spat_attrs=np.stack(attr_rows),
        points=np.concatenate(point_blocks) if point_blocks else np.zeros((0, 3)),
        point_slices=slices,
        structure=gnn.build_structure(len(nodes), edge_index),
        descriptors=descriptors,
        node_labels=np.asarray([-1 if n.gt_class is None else n.gt_class for n in nodes],
                               dtype=np.int64),
        edge_labels=np.asarray([-1 if e.gt_predicate is None else e.gt_predicate
                                for e in edges], dtype=np.int64),
        edge_pairs=[(e.src, e.dst) for e in edges],
    )


def forward_scene(prep: ScenePrep, params: ModelParams,
                  cfg: InferenceConfig) -> tuple[Value, Value | None]:
    """Project, gate, message-pass and score one prepared scene."""
    v0 = nn.linear(Value(prep.v0), params.projection)
    v_geo = feat.encode_points_batch(prep.points, prep.point_slices, params.geo)
    v_spat = nn.linear(Value(prep.spat_attrs), params.spat.weights)
    state = gnn.forward(v0, v_geo, v_spat, prep.descriptors, prep.structure, params.gnn,
                        num_layers=params.dims.layers,
                        use_neighbor_residual=cfg.neighbor_residual)
    return predict_logits(state, params)


def scene_loss(prep: ScenePrep, params: ModelParams, cfg: InferenceConfig,
               lambda_pred: float = 1.0,
               node_weights: np.ndarray | None = None,
               edge_weights: np.ndarray | None = None,
               stats: CooccurrenceStats | None = None) -> Value | None:
    """Mean node cross-entropy plus lambda times mean edge cross-entropy.

    Unlabeled nodes/edges are skipped; returns None when the scene carries no
    labels at all.  When ``stats`` is given the loss is taken on rescored
    logits (training-time rescoring).
    """
    node_logits, edge_logits = forward_scene(prep, params, cfg)
    if stats is not None:
        node_logits, edge_logits = _rescore_logits_values(
            node_logits, edge_logits, prep, stats, cfg)
    terms = []
    labeled_nodes = np.flatnonzero(prep.node_labels >= 0)
    if labeled_nodes.size:
        targets = prep.node_labels[labeled_nodes]
        w = node_weights[targets] if node_weights is not None else None
        terms.append(ad.cross_entropy_rows(
            ad.gather_rows(node_logits, labeled_nodes), targets, weights=w))
    labeled_edges = np.flatnonzero(prep.edge_labels >= 0)
    if edge_logits is not None and labeled_edges.size:
        targets = prep.edge_labels[labeled_edges]
        w = edge_weights[targets] if edge_weights is not None else None
        terms.append(ad.scale(ad.cross_entropy_rows(
            ad.gather_rows(edge_logits, labeled_edges), targets, weights=w), lambda_pred))
    if not terms:
        return None
    return ad.add_scalars(terms)


def _rescore_logits_values(node_logits: Value, edge_logits: Value | None,
                           prep: ScenePrep, stats: CooccurrenceStats,
                           cfg: InferenceConfig) -> tuple[Value, Value | None]:
    """Differentiable rescoring for training: alpha flows through the tape,
    neighbor classes and prior columns are treated as constants."""
    base = rescore._softmax_rows(node_logits.data)
    argmax = base.argmax(axis=1)
    gamma_node = rescore.inverse_softmax(rescore.conditional(stats, "node_pair"))
    alpha_nb = base.max(axis=1) if cfg.fixed_alpha is None else \
        np.full(base.shape[0], cfg.fixed_alpha)
    refined_rows = []
    for i, nbrs in enumerate(prep.structure.neighbors):
        row = ad.reshape(ad.gather_rows(node_logits, [i]), (node_logits.shape[1],))
        prior = np.zeros(node_logits.shape[1])
        for j in nbrs:
            prior += alpha_nb[j] * gamma_node[:, argmax[j]]
        if cfg.fixed_alpha is None:
            a = ad.vec_max(ad.softmax(row))
        else:
            a = Value(np.asarray(cfg.fixed_alpha))
        one_minus = ad.add(ad.scale(a, -1.0), Value(np.asarray(1.0)))
        refined = ad.add(ad.mul(a, row), ad.mul(one_minus, Value(prior)))
        refined_rows.append(refined)
    node_out = ad.stack_rows(refined_rows)
    if edge_logits is None:
        return node_out, None
    node_refined = rescore._softmax_rows(node_out.data)
    n_cls = node_refined.argmax(axis=1)
    n_alpha = (node_refined.max(axis=1) if cfg.fixed_alpha is None
               else np.full(node_refined.shape[0], cfg.fixed_alpha))
    g_subj = rescore.inverse_softmax(rescore.conditional(stats, "pred_given_subj"))
    g_obj = rescore.inverse_softmax(rescore.conditional(stats, "pred_given_obj"))
    edge_rows = []
    for k, (i, j) in enumerate(prep.structure.edge_index):
        row = ad.reshape(ad.gather_rows(edge_logits, [k]), (edge_logits.shape[1],))
        term_i = n_alpha[i] * g_subj[:, n_cls[i]]
        term_j = n_alpha[j] * g_obj[:, n_cls[j]]
        prior = term_i * term_j if cfg.cr_edge_combine == "product" else term_i + term_j
        if cfg.fixed_alpha is None:
            a = ad.vec_max(ad.softmax(row))
        else:
            a = Value(np.asarray(cfg.fixed_alpha))
        one_minus = ad.add(ad.scale(a, -1.0), Value(np.asarray(1.0)))
        edge_rows.append(ad.add(ad.mul(a, row), ad.mul(one_minus, Value(prior))))
    return node_out, ad.stack_rows(edge_rows)


def predict_scene(scene: SceneRecord, params: ModelParams, cfg: InferenceConfig,
                  stats: CooccurrenceStats | None = None,
                  prep: ScenePrep | None = None) -> SceneGraphPrediction:
    """Full prediction for one scene; rescoring applied when enabled."""
    if cfg.cr_enabled and stats is None:
        raise rescore.StatsError("rescoring enabled but no statistics supplied")
    if prep is None:
        prep = prepare_scene(scene, cfg)
    if cfg.cr_enabled:
        stats.check_vocab(scene.classes, scene.predicates)
    node_logits, edge_logits = forward_scene(prep, params, cfg)
    node_logits = node_logits.data
    edge_logits = edge_logits.data if edge_logits is not None else \
        np.zeros((0, params.dims.predicate_count))
    if cfg.cr_enabled:
        node_base, node_refined = rescore.rescore_nodes(
            node_logits, prep.structure.neighbors, stats,
            fixed_alpha=cfg.fixed_alpha, neighbor_mode=cfg.cr_neighbor_mode)
        edge_base, edge_refined = rescore.rescore_edges(
            edge_logits, prep.structure.edge_index, node_refined, stats,
            fixed_alpha=cfg.fixed_alpha, combine=cfg.cr_edge_combine)
    else:
        node_base = node_refined = rescore._softmax_rows(node_logits)
        edge_base = edge_refined = (rescore._softmax_rows(edge_logits)
                                    if edge_logits.shape[0] else edge_logits)
    return SceneGraphPrediction(
        scene_id=prep.scene_id,
        node_ids=prep.node_ids,
        node_base=node_base,
        node_refined=node_refined,
        node_classes=node_refined.argmax(axis=1),
        node_confidences=node_refined.max(axis=1),
        edge_pairs=prep.edge_pairs,
        edge_base=edge_base,
        edge_refined=edge_refined,
        edge_classes=(edge_refined.argmax(axis=1) if edge_refined.shape[0]
                      else np.zeros(0, dtype=np.int64)),
        edge_confidences=(edge_refined.max(axis=1) if edge_refined.shape[0]
                          else np.zeros(0)),
        cr_applied=cfg.cr_enabled,
    )


def worker_count() -> int:
    """Worker pool size; capped by the SSG_THREADS environment variable."""
    raw = os.environ.get("SSG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def predict_corpus(scenes: list[SceneRecord], params: ModelParams, cfg: InferenceConfig,
                   stats: CooccurrenceStats | None = None) -> list[SceneGraphPrediction]:
    threads = worker_count()
    if threads <= 1 or len(scenes) <= 1:
        return [predict_scene(s, params, cfg, stats) for s in scenes]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: predict_scene(s, params, cfg, stats), scenes))


def evaluate_corpus(scenes: list[SceneRecord], params: ModelParams, cfg: InferenceConfig,
                    stats: CooccurrenceStats | None = None,
                    exclude_none: bool = False) -> metrics.EvalReport:
    preds = predict_corpus(scenes, params, cfg, stats)
    return metrics.evaluate_predictions(preds, scenes, exclude_none=exclude_none)
