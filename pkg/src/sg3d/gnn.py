"""Residual spatial-neighbor GNN: gated feature fusion plus message passing.

Per layer, every node feature is first enriched with geometric then spatial
evidence through scalar sigmoid gates with residual adds.  Edge messages see
the max-pooled neighborhood of both endpoints (the neighbor residual); node
updates deliberately do not, and instead add the mean of triplet messages over
the undirected neighborhood.  Edge features start from an embedded descriptor
of relative box geometry and are updated residually.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Value
from .scene import Box3D

DESCRIPTOR_DIM = 11


@dataclass(eq=False)
class GateParams:
    w_g: Value  # [2h, 1] geometric gate weights
    w_s: Value  # [2h, 1] spatial gate weights


@dataclass(eq=False)
class GnnLayerParams:
    gate: GateParams
    edge_mlp: list[nn.Linear]  # 3h -> h -> h
    node_mlp: list[nn.Linear]  # 3h -> h -> h


@dataclass(eq=False)
class GnnParams:
    edge_embed: nn.Linear  # 11 -> h
    layers: list[GnnLayerParams]


def init_gnn(rng: np.random.Generator, h: int, layers: int) -> GnnParams:
    def layer() -> GnnLayerParams:
        bound = np.sqrt(6.0 / (2 * h + 1))
        gate = GateParams(
            w_g=Value(rng.uniform(-bound, bound, size=(2 * h, 1)), requires_grad=True),
            w_s=Value(rng.uniform(-bound, bound, size=(2 * h, 1)), requires_grad=True),
        )
        return GnnLayerParams(
            gate=gate,
            edge_mlp=[nn.init_linear(rng, 3 * h, h), nn.init_linear(rng, h, h)],
            node_mlp=[nn.init_linear(rng, 3 * h, h), nn.init_linear(rng, h, h)],
        )
    return GnnParams(edge_embed=nn.init_linear(rng, DESCRIPTOR_DIM, h),
                     layers=[layer() for _ in range(layers)])


@dataclass
class GraphStructure:
    """Index-level wiring of one scene, nodes in a fixed canonical order.

    ``edge_index`` holds (src, dst) node indices per directed edge.
    ``neighbors`` is the undirected adjacency (sorted, no self).  For node
    messages, ``pair_src``/``pair_nbr``/``pair_edge`` list one entry per
    (node, neighbor) incidence: the edge feature used is the directed edge
    node->neighbor when present, otherwise neighbor->node.  ``pair_slices``
    gives each node's contiguous range in those lists (empty for isolated
    nodes).
    """

    num_nodes: int
    edge_index: list[tuple[int, int]]
    neighbors: list[list[int]]
    pair_src: np.ndarray
    pair_nbr: np.ndarray
    pair_edge: np.ndarray
    pair_slices: list[tuple[int, int]]


def build_structure(num_nodes: int, edge_index: list[tuple[int, int]]) -> GraphStructure:
    directed = {pair: k for k, pair in enumerate(edge_index)}
    neighbors: list[set[int]] = [set() for _ in range(num_nodes)]
    for s, d in edge_index:
        neighbors[s].add(d)
        neighbors[d].add(s)
    sorted_nbrs = [sorted(nb) for nb in neighbors]
    pair_src, pair_nbr, pair_edge, pair_slices = [], [], [], []
    for i, nbrs in enumerate(sorted_nbrs):
        start = len(pair_src)
        for j in nbrs:
            k = directed.get((i, j))
            if k is None:
                k = directed[(j, i)]
            pair_src.append(i)
            pair_nbr.append(j)
            pair_edge.append(k)
        pair_slices.append((start, len(pair_src)))
    return GraphStructure(
        num_nodes=num_nodes,
        edge_index=list(edge_index),
        neighbors=sorted_nbrs,
        pair_src=np.asarray(pair_src, dtype=np.intp),
        pair_nbr=np.asarray(pair_nbr, dtype=np.intp),
        pair_edge=np.asarray(pair_edge, dtype=np.intp),
        pair_slices=pair_slices,
    )


@dataclass(eq=False)
class GraphState:
    node_feats: Value          # [M, h]
    edge_feats: Value | None   # [E, h], None when the scene has no edges
    structure: GraphStructure


def edge_descriptor(src_box: Box3D, dst_box: Box3D) -> np.ndarray:
    """Relative geometry of an ordered node pair as an 11-vector.

    Centroid displacement (3), extent difference (3), log volume ratio, log
    length ratio, and the unit direction src->dst (zero when centroids
    coincide).
    """
    c_s = np.asarray(src_box.centroid, dtype=np.float64)
    c_d = np.asarray(dst_box.centroid, dtype=np.float64)
    d_s = np.asarray(src_box.dims, dtype=np.float64)
    d_d = np.asarray(dst_box.dims, dtype=np.float64)
    delta = c_d - c_s
    norm = float(np.linalg.norm(delta))
    direction = delta / norm if norm > 0 else np.zeros(3)
    return np.concatenate([
        delta,
        d_d - d_s,
        [np.log(d_d.prod() / d_s.prod()), np.log(d_d.max() / d_s.max())],
        direction,
    ])


def _gate(v: Value, evidence: Value, w: Value) -> Value:
    """v + sigmoid(w . [v, evidence]) * sigmoid(evidence), rows = nodes."""
    squeeze = v.data.ndim == 1
    if squeeze:
        v = ad.reshape(v, (1, v.shape[0]))
        evidence = ad.reshape(evidence, (1, evidence.shape[0]))
    if v.shape != evidence.shape or w.shape != (2 * v.shape[1], 1):
        raise ad.ShapeError(
            f"gate shapes incompatible: v {v.shape}, evidence {evidence.shape}, w {w.shape}")
    score = ad.sigmoid(ad.matmul(ad.concat([v, evidence], axis=1), w))  # [M, 1]
    out = ad.add(v, ad.mul(score, ad.sigmoid(evidence)))
    if squeeze:
        out = ad.reshape(out, (out.shape[1],))
    return out


def geometric_gate(v: Value, v_geo: Value, w_g: Value) -> Value:
    return _gate(v, v_geo, w_g)


def spatial_gate(v_hat: Value, v_spat: Value, w_s: Value) -> Value:
    return _gate(v_hat, v_spat, w_s)


def neighbor_residual(v_i: Value, neighbors: list[Value]) -> Value:
    """Add the elementwise max over neighbor features; empty set adds zero."""
    if not neighbors:
        return v_i
    return ad.add(v_i, ad.max_pool_set(neighbors))


def edge_message(v_i: Value, e_ij: Value, v_j: Value, edge_mlp: list[nn.Linear]) -> Value:
    """Directional message from the ordered endpoint pair and edge feature."""
    squeeze = v_i.data.ndim == 1
    if squeeze:
        v_i = ad.reshape(v_i, (1, v_i.shape[0]))
        e_ij = ad.reshape(e_ij, (1, e_ij.shape[0]))
        v_j = ad.reshape(v_j, (1, v_j.shape[0]))
    out = nn.mlp(ad.concat([v_i, e_ij, v_j], axis=1), edge_mlp)
    if squeeze:
        out = ad.reshape(out, (out.shape[1],))
    return out


def forward(v0: Value, v_geo: Value, v_spat: Value, descriptors: np.ndarray,
            structure: GraphStructure, params: GnnParams,
            num_layers: int | None = None, use_neighbor_residual: bool = True) -> GraphState:
    """Run the message-passing stack on projected initial features.

    ``v0``/``v_geo``/``v_spat`` are [M, h] matrices in structure node order.
    Gate parameters are per layer; the geometric/spatial evidence is computed
    once and reused at every layer.
    """
    layers = params.layers if num_layers is None else params.layers[:num_layers]
    has_edges = len(structure.edge_index) > 0
    v = v0
    e = None
    if has_edges:
        e = nn.linear(Value(np.asarray(descriptors, dtype=np.float64)), params.edge_embed)
    for lp in layers:
        v_hat = geometric_gate(v, v_geo, lp.gate.w_g)
        v_dd = spatial_gate(v_hat, v_spat, lp.gate.w_s)
        if not has_edges:
            v = v_dd
            continue
        if use_neighbor_residual:
            rows = []
            for i, nbrs in enumerate(structure.neighbors):
                own = ad.gather_rows(v_dd, [i])
                if nbrs:
                    rows.append(ad.add(own, ad.rows_max(ad.gather_rows(v_dd, nbrs),
                                                        keepdims=True)))
                else:
                    rows.append(own)
            v_t = ad.concat(rows, axis=0)
        else:
            v_t = v_dd
        src = [s for s, _ in structure.edge_index]
        dst = [d for _, d in structure.edge_index]
        msg_in = ad.concat([ad.gather_rows(v_t, src), e, ad.gather_rows(v_t, dst)], axis=1)
        e_next = ad.add(e, nn.mlp(msg_in, lp.edge_mlp))

        node_in = ad.concat([ad.gather_rows(v_dd, structure.pair_src),
                             ad.gather_rows(e, structure.pair_edge),
                             ad.gather_rows(v_dd, structure.pair_nbr)], axis=1)
        msgs = nn.mlp(node_in, lp.node_mlp)
        rows = []
        for i, (lo, hi) in enumerate(structure.pair_slices):
            own = ad.gather_rows(v_dd, [i])
            if hi > lo:
                rows.append(ad.add(own, ad.rows_mean(ad.gather_rows(msgs, range(lo, hi)),
                                                     keepdims=True)))
            else:
                rows.append(own)
        v = ad.concat(rows, axis=0)
        e = e_next
    return GraphState(node_feats=v, edge_feats=e, structure=structure)
