"""All learnable parameter groups, the prediction heads, and checkpoint I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features, gnn, nn
from .autodiff import Value


class CheckpointError(ValueError):
    """Checkpoint file malformed or shape-inconsistent."""


@dataclass
class ModelDims:
    feature_dim: int       # D of the incoming multi-view features
    hidden: int = 256      # h; also d_geo and d_spat
    layers: int = 2
    class_count: int = 0
    predicate_count: int = 0


@dataclass(eq=False)
class PredictorParams:
    head_v: list[nn.Linear]  # h -> h -> C
    head_e: list[nn.Linear]  # h -> h -> P


@dataclass(eq=False)
class ModelParams:
    dims: ModelDims
    projection: nn.Linear  # D -> h, applied to the aggregated multi-view feature
    geo: features.GeometricEncoderParams
    spat: features.SpatialEncoderParams
    gnn: gnn.GnnParams
    heads: PredictorParams
    seed: int = 0
    _named: list[tuple[str, Value]] = field(default_factory=list, repr=False)

    def named_parameters(self) -> list[tuple[str, Value]]:
        if not self._named:
            named = nn.linear_params("projection", self.projection)
            named += nn.mlp_params("geo.point", self.geo.point_layers)
            named += nn.linear_params("geo.projection", self.geo.projection)
            named += nn.linear_params("spat", self.spat.weights)
            named += nn.linear_params("gnn.edge_embed", self.gnn.edge_embed)
            for i, lp in enumerate(self.gnn.layers):
                named.append((f"gnn.layer{i}.w_g", lp.gate.w_g))
                named.append((f"gnn.layer{i}.w_s", lp.gate.w_s))
                named += nn.mlp_params(f"gnn.layer{i}.edge_mlp", lp.edge_mlp)
                named += nn.mlp_params(f"gnn.layer{i}.node_mlp", lp.node_mlp)
            named += nn.mlp_params("heads.node", self.heads.head_v)
            named += nn.mlp_params("heads.edge", self.heads.head_e)
            self._named = named
        return self._named

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


def init_params(dims: ModelDims, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    h = dims.hidden
    return ModelParams(
        dims=dims,
        projection=nn.init_linear(rng, dims.feature_dim, h),
        geo=features.init_geometric_encoder(rng, h),
        spat=features.init_spatial_encoder(rng, h),
        gnn=gnn.init_gnn(rng, h, dims.layers),
        heads=PredictorParams(
            head_v=[nn.init_linear(rng, h, h), nn.init_linear(rng, h, dims.class_count)],
            head_e=[nn.init_linear(rng, h, h), nn.init_linear(rng, h, dims.predicate_count)],
        ),
        seed=seed,
    )


def predict_logits(state: gnn.GraphState, params: ModelParams) -> tuple[Value, Value | None]:
    """Raw class logits per node and predicate logits per edge."""
    node_logits = nn.mlp(state.node_feats, params.heads.head_v)
    edge_logits = None
    if state.edge_feats is not None:
        edge_logits = nn.mlp(state.edge_feats, params.heads.head_e)
    return node_logits, edge_logits


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then float64 data in header order
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path, config_echo: dict | None = None) -> None:
    path = Path(path)
    named = params.named_parameters()
    header = {
        "format": "sg3d-checkpoint-v1",
        "dims": {
            "feature_dim": params.dims.feature_dim,
            "hidden": params.dims.hidden,
            "layers": params.dims.layers,
            "class_count": params.dims.class_count,
            "predicate_count": params.dims.predicate_count,
        },
        "seed": params.seed,
        "config": config_echo or {},
        "tensors": [{"name": name, "shape": list(p.data.shape)} for name, p in named],
    }
    blob = np.concatenate([np.ascontiguousarray(p.data, dtype="<f8").reshape(-1)
                           for _, p in named])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob.tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from exc
    if header.get("format") != "sg3d-checkpoint-v1":
        raise CheckpointError(f"{path}: unknown checkpoint format")
    dims = ModelDims(**header["dims"])
    params = init_params(dims, seed=int(header.get("seed", 0)))
    named = params.named_parameters()
    tensors = header["tensors"]
    if [t["name"] for t in tensors] != [name for name, _ in named]:
        raise CheckpointError(f"{path}: tensor names disagree with the declared dims")
    blob = np.frombuffer(raw[nl + 1:], dtype="<f8")
    offset = 0
    for meta, (name, p) in zip(tensors, named):
        shape = tuple(meta["shape"])
        if shape != p.data.shape:
            raise CheckpointError(f"{path}: tensor '{name}' has shape {shape}, "
                                  f"expected {p.data.shape}")
        size = int(np.prod(shape)) if shape else 1
        if offset + size > blob.size:
            raise CheckpointError(f"{path}: blob truncated at tensor '{name}'")
        p.data = blob[offset:offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != blob.size:
        raise CheckpointError(f"{path}: {blob.size - offset} trailing values in blob")
    return params, header
