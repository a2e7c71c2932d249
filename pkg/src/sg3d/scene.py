"""Canonical in-memory scene representation and its on-disk formats.

A scene is a JSON document plus a sibling binary blob (same path with a
``.bin`` suffix) holding all bulk numerics as little-endian float32: node
point sets as flat xyz triples and per-view feature vectors, each addressed
by ``(data_offset, len)`` counted in float32 elements.  A corpus is a
directory of scene files plus a ``manifest.json`` naming the scene files and
the shared class/predicate vocabularies.

Records are treated as immutable after load and are safe to share across
threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree


class SceneFormatError(ValueError):
    """Scene file malformed or a record invariant violated."""


@dataclass(eq=False)
class View:
    view_id: str


@dataclass(eq=False)
class ViewFeature:
    view_id: str
    feature: np.ndarray  # [D] float32

    def equals(self, other: "ViewFeature") -> bool:
        return self.view_id == other.view_id and np.array_equal(self.feature, other.feature)


@dataclass(eq=False)
class Box3D:
    centroid: np.ndarray  # [3] metres
    dims: np.ndarray      # [3] positive extents, metres

    def equals(self, other: "Box3D") -> bool:
        return np.array_equal(self.centroid, other.centroid) and np.array_equal(self.dims, other.dims)


@dataclass(eq=False)
class NodeInstance:
    node_id: str
    points: np.ndarray  # [N, 3] float32
    bbox: Box3D
    view_features: list[ViewFeature] = field(default_factory=list)
    gt_class: int | None = None

    def equals(self, other: "NodeInstance") -> bool:
        return (self.node_id == other.node_id
                and np.array_equal(self.points, other.points)
                and self.bbox.equals(other.bbox)
                and len(self.view_features) == len(other.view_features)
                and all(a.equals(b) for a, b in zip(self.view_features, other.view_features))
                and self.gt_class == other.gt_class)


@dataclass(eq=False)
class EdgeInstance:
    src: str
    dst: str
    gt_predicate: int | None = None

    def equals(self, other: "EdgeInstance") -> bool:
        return (self.src, self.dst, self.gt_predicate) == (other.src, other.dst, other.gt_predicate)


@dataclass(eq=False)
class SceneRecord:
    scene_id: str
    feature_dim: int
    classes: list[str]
    predicates: list[str]  # index 0 reserved for "none"
    views: list[View]
    nodes: list[NodeInstance]
    edges: list[EdgeInstance]

    @property
    def class_count(self) -> int:
        return len(self.classes)

    @property
    def predicate_count(self) -> int:
        return len(self.predicates)

    def node_by_id(self, node_id: str) -> NodeInstance:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def equals(self, other: "SceneRecord") -> bool:
        return (self.scene_id == other.scene_id
                and self.feature_dim == other.feature_dim
                and self.classes == other.classes
                and self.predicates == other.predicates
                and [v.view_id for v in self.views] == [v.view_id for v in other.views]
                and len(self.nodes) == len(other.nodes)
                and all(a.equals(b) for a, b in zip(self.nodes, other.nodes))
                and len(self.edges) == len(other.edges)
                and all(a.equals(b) for a, b in zip(self.edges, other.edges)))


def validate_scene(scene: SceneRecord) -> None:
    """Check every record invariant; raise SceneFormatError naming the offender."""
    sid = scene.scene_id
    if not scene.predicates or scene.predicates[0] != "none":
        raise SceneFormatError(f"scene '{sid}': predicate index 0 must be named 'none'")
    view_ids = [v.view_id for v in scene.views]
    if len(set(view_ids)) != len(view_ids):
        raise SceneFormatError(f"scene '{sid}': duplicate view_id")
    view_set = set(view_ids)
    node_ids = set()
    for node in scene.nodes:
        if node.node_id in node_ids:
            raise SceneFormatError(f"scene '{sid}': duplicate node_id '{node.node_id}'")
        node_ids.add(node.node_id)
        pts = np.asarray(node.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise SceneFormatError(f"scene '{sid}': node '{node.node_id}' points must be [N, 3]")
        if not np.isfinite(pts).all():
            raise SceneFormatError(f"scene '{sid}': node '{node.node_id}' has non-finite points")
        if not (np.asarray(node.bbox.dims) > 0).all():
            raise SceneFormatError(f"scene '{sid}': node '{node.node_id}' has non-positive box dims")
        if not np.isfinite(node.bbox.centroid).all() or not np.isfinite(node.bbox.dims).all():
            raise SceneFormatError(f"scene '{sid}': node '{node.node_id}' has non-finite box")
        seen_views = set()
        for vf in node.view_features:
            if vf.view_id not in view_set:
                raise SceneFormatError(
                    f"scene '{sid}': node '{node.node_id}' references unknown view '{vf.view_id}'")
            if vf.view_id in seen_views:
                raise SceneFormatError(
                    f"scene '{sid}': node '{node.node_id}' repeats view '{vf.view_id}'")
            seen_views.add(vf.view_id)
            if vf.feature.shape != (scene.feature_dim,):
                raise SceneFormatError(
                    f"scene '{sid}': node '{node.node_id}' view '{vf.view_id}' feature has "
                    f"length {vf.feature.shape}, expected ({scene.feature_dim},)")
            if not np.isfinite(vf.feature).all():
                raise SceneFormatError(
                    f"scene '{sid}': node '{node.node_id}' view '{vf.view_id}' feature is non-finite")
        if node.gt_class is not None and not 0 <= node.gt_class < len(scene.classes):
            raise SceneFormatError(
                f"scene '{sid}': node '{node.node_id}' gt_class {node.gt_class} out of range")
    seen_pairs = set()
    for i, edge in enumerate(scene.edges):
        if edge.src == edge.dst:
            raise SceneFormatError(f"scene '{sid}': edge {i} is a self-loop on '{edge.src}'")
        for endpoint in (edge.src, edge.dst):
            if endpoint not in node_ids:
                raise SceneFormatError(
                    f"scene '{sid}': edge {i} ({edge.src} -> {edge.dst}) references "
                    f"unknown node '{endpoint}'")
        if (edge.src, edge.dst) in seen_pairs:
            raise SceneFormatError(
                f"scene '{sid}': duplicate directed edge ({edge.src} -> {edge.dst})")
        seen_pairs.add((edge.src, edge.dst))
        if edge.gt_predicate is not None and not 0 <= edge.gt_predicate < len(scene.predicates):
            raise SceneFormatError(
                f"scene '{sid}': edge {i} gt_predicate {edge.gt_predicate} out of range")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _blob_path(path: Path) -> Path:
    return path.with_suffix(".bin")


def save_scene(scene: SceneRecord, path) -> None:
    """Write the scene JSON and its sibling float32 blob."""
    validate_scene(scene)
    path = Path(path)
    blob_parts: list[np.ndarray] = []
    offset = 0

    def push(arr: np.ndarray) -> tuple[int, int]:
        nonlocal offset
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        blob_parts.append(flat)
        ref = (offset, flat.size)
        offset += flat.size
        return ref

    nodes_doc = []
    for node in scene.nodes:
        p_off, p_len = push(node.points)
        feats = []
        for vf in node.view_features:
            f_off, f_len = push(vf.feature)
            feats.append({"view_id": vf.view_id, "data_offset": f_off, "len": f_len})
        nodes_doc.append({
            "node_id": node.node_id,
            "gt_class": node.gt_class,
            "bbox": {"centroid": [float(x) for x in node.bbox.centroid],
                     "dims": [float(x) for x in node.bbox.dims]},
            "points_file": {"data_offset": p_off, "len": p_len},
            "features": feats,
        })
    doc = {
        "scene_id": scene.scene_id,
        "feature_dim": scene.feature_dim,
        "classes": scene.classes,
        "predicates": scene.predicates,
        "views": [{"view_id": v.view_id} for v in scene.views],
        "nodes": nodes_doc,
        "edges": [{"src": e.src, "dst": e.dst, "gt_predicate": e.gt_predicate}
                  for e in scene.edges],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    blob = np.concatenate(blob_parts) if blob_parts else np.empty(0, dtype="<f4")
    _blob_path(path).write_bytes(blob.tobytes())


def load_scene(path) -> SceneRecord:
    """Read and fully validate a scene file pair."""
    path = Path(path)
    if not path.exists():
        raise SceneFormatError(f"scene file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    blob_file = _blob_path(path)
    if not blob_file.exists():
        raise SceneFormatError(f"missing sibling blob: {blob_file}")
    blob = np.frombuffer(blob_file.read_bytes(), dtype="<f4")

    def fetch(ref, what: str) -> np.ndarray:
        try:
            off, length = int(ref["data_offset"]), int(ref["len"])
        except (TypeError, KeyError) as exc:
            raise SceneFormatError(f"{path}: {what}: blob reference must carry "
                                   "data_offset and len") from exc
        if off < 0 or length < 0 or off + length > blob.size:
            raise SceneFormatError(f"{path}: {what}: blob reference ({off}, {length}) "
                                   f"out of range for blob of {blob.size} values")
        return blob[off:off + length].copy()

    try:
        nodes = []
        for nd in doc["nodes"]:
            nid = nd["node_id"]
            pts = fetch(nd["points_file"], f"node '{nid}' points")
            if pts.size % 3 != 0:
                raise SceneFormatError(f"{path}: node '{nid}' points length not divisible by 3")
            feats = [ViewFeature(view_id=fd["view_id"],
                                 feature=fetch(fd, f"node '{nid}' feature"))
                     for fd in nd["features"]]
            nodes.append(NodeInstance(
                node_id=nid,
                points=pts.reshape(-1, 3),
                bbox=Box3D(centroid=np.asarray(nd["bbox"]["centroid"], dtype=np.float64),
                           dims=np.asarray(nd["bbox"]["dims"], dtype=np.float64)),
                view_features=feats,
                gt_class=nd["gt_class"],
            ))
        scene = SceneRecord(
            scene_id=doc["scene_id"],
            feature_dim=int(doc["feature_dim"]),
            classes=list(doc["classes"]),
            predicates=list(doc["predicates"]),
            views=[View(view_id=vd["view_id"]) for vd in doc["views"]],
            nodes=nodes,
            edges=[EdgeInstance(src=ed["src"], dst=ed["dst"], gt_predicate=ed["gt_predicate"])
                   for ed in doc["edges"]],
        )
    except (KeyError, TypeError) as exc:
        raise SceneFormatError(f"{path}: missing or malformed field: {exc}") from exc
    validate_scene(scene)
    return scene


# ---------------------------------------------------------------------------
# corpus directory
# ---------------------------------------------------------------------------

def save_corpus(scenes: list[SceneRecord], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not scenes:
        raise SceneFormatError("refusing to write an empty corpus")
    names = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:05d}.json"
        save_scene(scene, out_dir / name)
        names.append(name)
    manifest = {
        "classes": scenes[0].classes,
        "predicates": scenes[0].predicates,
        "feature_dim": scenes[0].feature_dim,
        "scenes": names,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_corpus(corpus_dir) -> list[SceneRecord]:
    corpus_dir = Path(corpus_dir)
    manifest_file = corpus_dir / "manifest.json"
    if not manifest_file.exists():
        raise SceneFormatError(f"corpus manifest not found: {manifest_file}")
    manifest = json.loads(manifest_file.read_text())
    scenes = []
    for name in manifest["scenes"]:
        scene = load_scene(corpus_dir / name)
        if scene.classes != manifest["classes"] or scene.predicates != manifest["predicates"]:
            raise SceneFormatError(
                f"scene '{scene.scene_id}' vocabulary disagrees with corpus manifest")
        if scene.feature_dim != manifest["feature_dim"]:
            raise SceneFormatError(
                f"scene '{scene.scene_id}' feature_dim {scene.feature_dim} disagrees with "
                f"manifest {manifest['feature_dim']}")
        scenes.append(scene)
    return scenes


# ---------------------------------------------------------------------------
# candidate pairs and instance matching
# ---------------------------------------------------------------------------

def build_proximity_edges(scene: SceneRecord, radius: float = 2.0) -> SceneRecord:
    """All ordered node pairs within centroid distance ``radius``.

    Existing edges are preserved with their labels; new pairs are unlabeled.
    Returns a new record, leaving the input untouched.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    existing = {(e.src, e.dst): e for e in scene.edges}
    edges = list(scene.edges)
    for a in scene.nodes:
        for b in scene.nodes:
            if a.node_id == b.node_id or (a.node_id, b.node_id) in existing:
                continue
            dist = float(np.linalg.norm(a.bbox.centroid - b.bbox.centroid))
            if dist <= radius:
                edges.append(EdgeInstance(src=a.node_id, dst=b.node_id, gt_predicate=None))
    return SceneRecord(
        scene_id=scene.scene_id,
        feature_dim=scene.feature_dim,
        classes=scene.classes,
        predicates=scene.predicates,
        views=scene.views,
        nodes=scene.nodes,
        edges=edges,
    )


def match_instances(predicted_nodes: list[np.ndarray], gt_nodes: list[np.ndarray],
                    tolerance: float = 0.05) -> list[int | None]:
    """Greedy predicted-to-GT segment assignment by shared-point count.

    A predicted point is shared with a GT segment when its nearest neighbour in
    that segment lies within ``tolerance`` metres.  Pairs are assigned in
    descending shared-count order (ties by lowest indices); each GT node is
    used at most once and zero-overlap predictions stay unmatched.
    """
    for i, pts in enumerate(predicted_nodes):
        if len(pts) == 0:
            raise ValueError(f"predicted point set {i} is empty")
    for j, pts in enumerate(gt_nodes):
        if len(pts) == 0:
            raise ValueError(f"gt point set {j} is empty")
    trees = [cKDTree(np.asarray(pts, dtype=np.float64)) for pts in gt_nodes]
    overlap = np.zeros((len(predicted_nodes), len(gt_nodes)), dtype=np.int64)
    for i, pts in enumerate(predicted_nodes):
        pts = np.asarray(pts, dtype=np.float64)
        for j, tree in enumerate(trees):
            dists, _ = tree.query(pts, k=1)
            overlap[i, j] = int((dists <= tolerance).sum())
    pairs = sorted(((int(overlap[i, j]), i, j)
                    for i in range(overlap.shape[0])
                    for j in range(overlap.shape[1])
                    if overlap[i, j] > 0),
                   key=lambda t: (-t[0], t[1], t[2]))
    mapping: list[int | None] = [None] * len(predicted_nodes)
    used_gt: set[int] = set()
    for _, i, j in pairs:
        if mapping[i] is None and j not in used_gt:
            mapping[i] = j
            used_gt.add(j)
    return mapping
