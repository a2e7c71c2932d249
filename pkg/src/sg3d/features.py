"""Initial node features: multi-view mean, point-set encoding, box attributes.

Each node enters the GNN with three ingredients: the arithmetic mean of its
per-view image features over the covisibility graph, a permutation-invariant
encoding of its point set (shared per-point MLP followed by max pooling), and
a linear embedding of its box attributes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Value
from .scene import Box3D, NodeInstance, SceneRecord

logger = logging.getLogger(__name__)

RATIO_CLAMP = (1e-3, 1e3)  # guard degenerate flat boxes

GEO_WIDTHS = (3, 64, 128, 256)  # shared per-point MLP, then projection to d_geo


class FeatureInitError(ValueError):
    """A node cannot produce a requested feature."""


@dataclass(eq=False)
class GeometricEncoderParams:
    point_layers: list[nn.Linear]  # 3 -> 64 -> 128 -> 256, ReLU after each
    projection: nn.Linear          # 256 -> d_geo, applied after max pooling


@dataclass(eq=False)
class SpatialEncoderParams:
    weights: nn.Linear  # 6 -> d_spat, no bias


@dataclass(eq=False)
class InitialNodeFeatures:
    v0: np.ndarray    # aggregated multi-view feature, [D]
    v_geo: Value      # [d_geo]
    v_spat: Value     # [d_spat]


def init_geometric_encoder(rng: np.random.Generator, d_geo: int) -> GeometricEncoderParams:
    layers = [nn.init_linear(rng, GEO_WIDTHS[i], GEO_WIDTHS[i + 1])
              for i in range(len(GEO_WIDTHS) - 1)]
    return GeometricEncoderParams(point_layers=layers,
                                  projection=nn.init_linear(rng, GEO_WIDTHS[-1], d_geo))


def init_spatial_encoder(rng: np.random.Generator, d_spat: int) -> SpatialEncoderParams:
    return SpatialEncoderParams(weights=nn.init_linear(rng, 6, d_spat, bias=False))


@dataclass
class SpatialAttributes:
    """Box dims plus derived volume, length (max extent) and x/y ratio."""

    dims: np.ndarray
    volume: float
    length: float
    ratio: float

    @classmethod
    def from_box(cls, box: Box3D) -> "SpatialAttributes":
        dims = np.asarray(box.dims, dtype=np.float64)
        if not (dims > 0).all():
            raise FeatureInitError(f"box has non-positive dims {dims}")
        ratio = float(np.clip(dims[0] / dims[1], *RATIO_CLAMP))
        return cls(dims=dims, volume=float(dims.prod()), length=float(dims.max()), ratio=ratio)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dims, [self.volume, self.length, self.ratio]])


def aggregate_multiview(node: NodeInstance, strict: bool = True) -> np.ndarray:
    """Element-wise arithmetic mean of the node's per-view features.

    In strict mode a node visible in zero views is an error; lenient mode
    substitutes a zero vector and logs a warning (silent zeros would mask
    upstream covisibility bugs, so strict is the default).
    """
    if not node.view_features:
        if strict:
            raise FeatureInitError(
                f"node '{node.node_id}' has no view features (visible in zero views)")
        logger.warning("node '%s' has no view features; using zero vector", node.node_id)
        return np.zeros(0)
    stacked = np.stack([vf.feature.astype(np.float64) for vf in node.view_features])
    return stacked.sum(axis=0) / stacked.shape[0]


def center_points(points: np.ndarray) -> np.ndarray:
    """Subtract the centroid of the distinct points.

    Averaging over the sorted distinct points makes the offset, and therefore
    the whole encoding, bit-identical under point permutation and duplication.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        raise FeatureInitError("cannot encode an empty point set")
    centroid = np.unique(pts, axis=0).mean(axis=0)
    return pts - centroid


def encode_points(points: np.ndarray, params: GeometricEncoderParams) -> Value:
    """Encode one centred point set; permutation invariant by construction."""
    centred = Value(center_points(points))
    h = centred
    for layer in params.point_layers:
        h = ad.relu(nn.linear(h, layer))
    pooled = ad.rows_max(h, keepdims=True)
    return ad.reshape(nn.linear(pooled, params.projection), (params.projection.w.shape[1],))


def encode_points_batch(centred_concat: np.ndarray, slices: list[tuple[int, int]],
                        params: GeometricEncoderParams) -> Value:
    """Encode many point sets through one shared-MLP pass.

    ``centred_concat`` holds all nodes' centred points stacked row-wise;
    ``slices`` gives each node's (start, stop) row range.  Returns an
    [M, d_geo] matrix, rows in slice order.
    """
    h = Value(centred_concat)
    for layer in params.point_layers:
        h = ad.relu(nn.linear(h, layer))
    pooled = ad.concat([ad.rows_max(ad.gather_rows(h, range(lo, hi)), keepdims=True)
                        for lo, hi in slices], axis=0)
    return nn.linear(pooled, params.projection)


def encode_spatial(box: Box3D, params: SpatialEncoderParams) -> Value:
    attrs = Value(SpatialAttributes.from_box(box).as_vector()[None, :])
    return ad.reshape(nn.linear(attrs, params.weights), (params.weights.w.shape[1],))


def init_scene_features(scene: SceneRecord, geo_params: GeometricEncoderParams,
                        spat_params: SpatialEncoderParams,
                        strict: bool = True) -> dict[str, InitialNodeFeatures]:
    """All three initial features per node, keyed by node_id."""
    out = {}
    for node in scene.nodes:
        v0 = aggregate_multiview(node, strict=strict)
        if v0.size == 0:
            v0 = np.zeros(scene.feature_dim)
        out[node.node_id] = InitialNodeFeatures(
            v0=v0,
            v_geo=encode_points(node.points, geo_params),
            v_spat=encode_spatial(node.bbox, spat_params),
        )
    return out
