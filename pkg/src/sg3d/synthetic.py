"""Deterministic synthetic scene corpora with controllable co-occurrence structure.

The generator draws scenes from a sampled ground-truth model: unit-norm class
prototypes (built as confusable close pairs whose members appear in different
scene contexts, so neighborhood statistics carry real signal), a background
prototype, per-context class mixtures, and a predicate table conditioned on
both endpoint classes.  Per-view features are convex blends of the class and
background prototypes plus Gaussian noise, unit-normalized; the blend weight
models background contamination and is damped by mask quality in mask mode.
Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import metrics
from .rescore import SceneGraphPrediction
from .scene import (Box3D, EdgeInstance, NodeInstance, SceneRecord, View,
                    ViewFeature, save_corpus)


class GenConfigError(ValueError):
    """Generator configuration out of range."""


@dataclass
class GenConfig:
    seed: int = 0
    class_count: int = 10
    predicate_count: int = 5
    feature_dim: int = 32
    scenes: int = 200
    nodes_min: int = 4
    nodes_max: int = 9
    edge_radius: float = 3.0
    room_size: tuple[float, float, float] = (6.0, 6.0, 3.0)
    proto_scale: float = 1.0
    proto_separation: float = 0.55   # base distance between confusable prototype
                                     # pairs; graded so late pairs are much closer
    feature_noise: float = 0.3       # sigma of per-view Gaussian noise
    contamination_mode: str = "bbox"  # "bbox" or "mask"
    contamination_max: float = 0.5    # beta_max
    mask_quality: float = 0.8         # q; mask mode scales beta by (1 - q)
    views_min: int = 2
    views_max: int = 6
    view_pool: int = 6
    points_min: int = 64
    points_max: int = 256
    contexts: int = 4                 # class context mixture count
    context_floor: float = 0.05       # probability mass spread over all classes
    context_skew: float = 0.45        # scene-type frequency ratio between consecutive
                                      # contexts; < 1 gives a long-tailed class marginal
                                      # while keeping within-context conditionals balanced
    member_skew: float = 0.7          # weight ratio between consecutive classes inside
                                      # one context; mild imbalance biases the priors
    predicate_table: np.ndarray | None = None  # [P, C, C] or None for random-concentrated
    predicate_concentration: float = 0.25
    none_weight: float = 1.0          # extra mass on the None predicate

    def validate(self) -> None:
        if self.nodes_min < 2:
            raise GenConfigError("nodes_min must be >= 2 for edge-bearing scenes")
        if self.nodes_max < self.nodes_min:
            raise GenConfigError("nodes_max must be >= nodes_min")
        if not 0.0 <= self.contamination_max <= 1.0:
            raise GenConfigError("contamination_max must be in [0, 1]")
        if not 0.0 <= self.mask_quality <= 1.0:
            raise GenConfigError("mask_quality must be in [0, 1]")
        if self.contamination_mode not in ("bbox", "mask"):
            raise GenConfigError(f"unknown contamination_mode '{self.contamination_mode}'")
        if self.class_count < 2 or self.predicate_count < 2:
            raise GenConfigError("need at least 2 classes and 2 predicates")
        if not 2 <= self.views_min <= self.views_max <= self.view_pool:
            raise GenConfigError("view counts must satisfy 2 <= min <= max <= pool")
        if self.predicate_table is not None:
            table = np.asarray(self.predicate_table)
            shape = (self.predicate_count, self.class_count, self.class_count)
            if table.shape != shape:
                raise GenConfigError(f"predicate_table must have shape {shape}")
            if (table < 0).any() or not np.allclose(table.sum(axis=0), 1.0):
                raise GenConfigError("predicate_table columns must be distributions")


@dataclass
class GroundTruthModel:
    classes: list[str]
    predicates: list[str]
    feature_dim: int
    prototypes: np.ndarray        # [C, D] unit rows
    background: np.ndarray        # [D] unit
    contexts: np.ndarray          # [K, C] rows are class mixtures
    context_probs: np.ndarray     # [K] scene-type frequencies
    box_scale: np.ndarray         # [C] per-class box size scale
    predicate_table: np.ndarray   # [P, C, C]; [:, cs, co] is P(r | cs, co)

    def class_marginal(self) -> np.ndarray:
        """Overall class distribution under the scene-type frequencies."""
        return self.context_probs @ self.contexts


def _normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def build_model(config: GenConfig) -> GroundTruthModel:
    config.validate()
    rng = np.random.default_rng([config.seed, 0x6D0DE1])
    c, d, k = config.class_count, config.feature_dim, config.contexts

    # Prototype pairs straddle a shared base direction; pair members are
    # assigned to different contexts below, so co-occurrence disambiguates them.
    # Separation is graded: early pairs stay easy (confident anchors), late
    # pairs are nearly identical and also the rarest under the context skew.
    prototypes = np.empty((c, d))
    n_pairs = (c + 1) // 2
    grades = np.linspace(2.0, 0.4, n_pairs) if n_pairs > 1 else np.ones(1)
    for pair in range(n_pairs):
        base = _normalize(rng.standard_normal(d))
        half = config.proto_separation * grades[pair] / 2.0
        split = _normalize(rng.standard_normal(d)) * half
        prototypes[2 * pair] = _normalize(base + split) * config.proto_scale
        if 2 * pair + 1 < c:
            prototypes[2 * pair + 1] = _normalize(base - split) * config.proto_scale
    background = _normalize(rng.standard_normal(d))

    contexts = np.full((k, c), config.context_floor / c)
    members: list[list[int]] = [[] for _ in range(k)]
    for cls in range(c):
        members[cls % k].append(cls)
    for ctx, cls_list in enumerate(members):
        if cls_list:
            contexts[ctx, cls_list] += (1.0 - config.context_floor) / len(cls_list)
    contexts /= contexts.sum(axis=1, keepdims=True)
    context_probs = config.context_skew ** np.arange(k)
    context_probs /= context_probs.sum()

    # twins share a box scale so geometry alone cannot separate a pair
    box_scale = np.empty(c)
    for pair in range(n_pairs):
        s = rng.uniform(0.3, 1.0)
        box_scale[2 * pair] = s
        if 2 * pair + 1 < c:
            box_scale[2 * pair + 1] = s

    if config.predicate_table is not None:
        table = np.asarray(config.predicate_table, dtype=np.float64).copy()
    else:
        p = config.predicate_count
        table = np.empty((p, c, c))
        for cs in range(c):
            for co in range(c):
                w = rng.dirichlet(np.full(p, config.predicate_concentration))
                w[0] += config.none_weight
                table[:, cs, co] = w / w.sum()

    return GroundTruthModel(
        classes=[f"class_{i:02d}" for i in range(c)],
        predicates=["none"] + [f"rel_{i}" for i in range(1, config.predicate_count)],
        feature_dim=d,
        prototypes=prototypes,
        background=background,
        contexts=contexts,
        context_probs=context_probs,
        box_scale=box_scale,
        predicate_table=table,
    )


def _draw_beta(rng: np.random.Generator, config: GenConfig) -> float:
    beta = rng.uniform(0.0, config.contamination_max)
    if config.contamination_mode == "mask":
        beta *= 1.0 - config.mask_quality
    return beta


def gen_scene(config: GenConfig, model: GroundTruthModel, index: int) -> SceneRecord:
    rng = np.random.default_rng(config.seed ^ index)
    room = np.asarray(config.room_size)
    ctx = int(rng.choice(model.contexts.shape[0], p=model.context_probs))
    m = int(rng.integers(config.nodes_min, config.nodes_max + 1))
    classes = rng.choice(model.prototypes.shape[0], size=m, p=model.contexts[ctx])

    view_ids = [f"v{index:05d}_{i}" for i in range(config.view_pool)]
    nodes = []
    for n in range(m):
        cls = int(classes[n])
        dims = model.box_scale[cls] * rng.uniform(0.6, 1.4, size=3)
        centroid = rng.uniform(0.0, 1.0, size=3) * room
        n_pts = int(rng.integers(config.points_min, config.points_max + 1))
        points = (centroid + (rng.uniform(-0.5, 0.5, size=(n_pts, 3)) * dims)).astype(np.float32)
        n_views = int(rng.integers(config.views_min, config.views_max + 1))
        chosen = rng.choice(config.view_pool, size=n_views, replace=False)
        feats = []
        for v in sorted(int(x) for x in chosen):
            beta = _draw_beta(rng, config)
            f = ((1.0 - beta) * model.prototypes[cls] + beta * model.background
                 + config.feature_noise * rng.standard_normal(model.feature_dim))
            feats.append(ViewFeature(view_id=view_ids[v],
                                     feature=_normalize(f).astype(np.float32)))
        nodes.append(NodeInstance(
            node_id=f"n{n:03d}",
            points=points,
            bbox=Box3D(centroid=centroid, dims=dims),
            view_features=feats,
            gt_class=cls,
        ))

    edges = []
    for a in range(m):
        for b in range(m):
            if a == b:
                continue
            dist = np.linalg.norm(nodes[a].bbox.centroid - nodes[b].bbox.centroid)
            if dist <= config.edge_radius:
                probs = model.predicate_table[:, int(classes[a]), int(classes[b])]
                r = int(rng.choice(len(probs), p=probs))
                edges.append(EdgeInstance(src=nodes[a].node_id, dst=nodes[b].node_id,
                                          gt_predicate=r))

    return SceneRecord(
        scene_id=f"syn_{config.seed:08d}_{index:05d}",
        feature_dim=model.feature_dim,
        classes=model.classes,
        predicates=model.predicates,
        views=[View(view_id=v) for v in view_ids],
        nodes=nodes,
        edges=edges,
    )


def gen_scenes(config: GenConfig, model: GroundTruthModel | None = None
               ) -> tuple[list[SceneRecord], GroundTruthModel]:
    if model is None:
        model = build_model(config)
    return [gen_scene(config, model, i) for i in range(config.scenes)], model


def gen_corpus(config: GenConfig, out_dir,
               model: GroundTruthModel | None = None) -> GroundTruthModel:
    """Write a corpus directory (scenes + manifest + model.json).

    Passing a model draws scenes from an existing ground truth (train/val/test
    splits of one world use the same model with different scene seeds).
    """
    scenes, model = gen_scenes(config, model=model)
    save_corpus(scenes, out_dir)
    save_model(model, Path(out_dir) / "model.json", config)
    return model


def save_model(model: GroundTruthModel, path, config: GenConfig | None = None) -> None:
    doc = {
        "classes": model.classes,
        "predicates": model.predicates,
        "feature_dim": model.feature_dim,
        "prototypes": model.prototypes.tolist(),
        "background": model.background.tolist(),
        "contexts": model.contexts.tolist(),
        "context_probs": model.context_probs.tolist(),
        "box_scale": model.box_scale.tolist(),
        "predicate_table": model.predicate_table.tolist(),
    }
    if config is not None:
        echo = asdict(config)
        echo["room_size"] = list(echo["room_size"])
        if echo["predicate_table"] is not None:
            echo["predicate_table"] = np.asarray(echo["predicate_table"]).tolist()
        doc["config"] = echo
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_model(path) -> GroundTruthModel:
    doc = json.loads(Path(path).read_text())
    return GroundTruthModel(
        classes=list(doc["classes"]),
        predicates=list(doc["predicates"]),
        feature_dim=int(doc["feature_dim"]),
        prototypes=np.asarray(doc["prototypes"]),
        background=np.asarray(doc["background"]),
        contexts=np.asarray(doc["contexts"]),
        context_probs=np.asarray(doc["context_probs"]),
        box_scale=np.asarray(doc["box_scale"]),
        predicate_table=np.asarray(doc["predicate_table"]),
    )


def bayes_reference(scenes: list[SceneRecord], model: GroundTruthModel,
                    exclude_none: bool = False) -> metrics.EvalReport:
    """Oracle-style upper bound: nearest prototype per node, table argmax per edge.

    Node classification uses the aggregated multi-view feature against the
    normalized prototypes; predicates are the table argmax given the true
    endpoint classes.  Distributions are one-hot.
    """
    if scenes and scenes[0].feature_dim != model.feature_dim:
        raise GenConfigError("corpus feature_dim does not match the model")
    unit_protos = model.prototypes / np.linalg.norm(model.prototypes, axis=1, keepdims=True)
    predictions = []
    for scene in scenes:
        node_ids = sorted(n.node_id for n in scene.nodes)
        by_id = {n.node_id: n for n in scene.nodes}
        c = len(model.classes)
        base = np.zeros((len(node_ids), c))
        cls = np.zeros(len(node_ids), dtype=np.int64)
        for k, nid in enumerate(node_ids):
            node = by_id[nid]
            agg = np.stack([vf.feature.astype(np.float64)
                            for vf in node.view_features]).mean(axis=0)
            cls[k] = int(np.argmin(np.linalg.norm(unit_protos - agg, axis=1)))
            base[k, cls[k]] = 1.0
        gt = {n.node_id: n.gt_class for n in scene.nodes}
        pairs, rows = [], []
        for edge in scene.edges:
            pairs.append((edge.src, edge.dst))
            probs = model.predicate_table[:, gt[edge.src], gt[edge.dst]]
            row = np.zeros(len(model.predicates))
            row[int(np.argmax(probs))] = 1.0
            rows.append(row)
        edge_base = np.stack(rows) if rows else np.zeros((0, len(model.predicates)))
        predictions.append(SceneGraphPrediction(
            scene_id=scene.scene_id,
            node_ids=node_ids,
            node_base=base,
            node_refined=base,
            node_classes=cls,
            node_confidences=base.max(axis=1),
            edge_pairs=pairs,
            edge_base=edge_base,
            edge_refined=edge_base,
            edge_classes=(edge_base.argmax(axis=1) if len(rows)
                          else np.zeros(0, dtype=np.int64)),
            edge_confidences=(edge_base.max(axis=1) if len(rows) else np.zeros(0)),
            cr_applied=False,
        ))
    return metrics.evaluate_predictions(predictions, scenes, exclude_none=exclude_none)
