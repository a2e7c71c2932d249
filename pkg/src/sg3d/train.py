"""Supervised training loop with adaptive-moment updates and early stopping.

Per-scene gradients are accumulated over a batch, then a single writer applies
one update; scenes are visited in a seeded shuffled order so fixed seeds give
bit-identical histories.  The checkpoint kept is the one with the best
validation relationship recall.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Tape
from .model import ModelParams
from .pipeline import InferenceConfig, ScenePrep, evaluate_corpus, prepare_scene, scene_loss
from .rescore import CooccurrenceStats
from .scene import SceneRecord


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 60
    patience: int = 8            # epochs without val relationship recall improvement
    batch_size: int = 8
    lambda_pred: float = 1.0
    class_weights: bool = False  # inverse-frequency weighting of both CE terms
    cr_in_training: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError("step size must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


class Adam:
    """First-order adaptive-moment optimizer over named parameter tensors."""

    def __init__(self, params: list, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self) -> None:
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = p.data - c.lr * m_hat / (np.sqrt(v_hat) + c.adam_eps)


def inverse_frequency_weights(labels: np.ndarray, count: int) -> np.ndarray:
    """Per-class weights proportional to 1/frequency, normalized to mean one
    over observed classes; unseen classes get weight one."""
    freq = np.bincount(labels[labels >= 0], minlength=count).astype(np.float64)
    weights = np.ones(count)
    seen = freq > 0
    weights[seen] = 1.0 / freq[seen]
    weights[seen] *= seen.sum() / weights[seen].sum()
    return weights


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_recall: float = -1.0


def train(train_scenes: list[SceneRecord], val_scenes: list[SceneRecord],
          params: ModelParams, cfg: TrainConfig,
          infer_cfg: InferenceConfig | None = None,
          stats: CooccurrenceStats | None = None) -> TrainResult:
    """Fit ``params`` in place; on return they hold the best-validation state."""
    cfg.validate()
    if not train_scenes:
        raise ValueError("empty training corpus")
    if infer_cfg is None:
        infer_cfg = InferenceConfig(cr_enabled=False)
    loss_stats = stats if cfg.cr_in_training else None
    if cfg.cr_in_training and stats is None:
        raise ValueError("cr_in_training requires co-occurrence statistics")

    preps = [prepare_scene(s, infer_cfg) for s in train_scenes]
    node_w = edge_w = None
    if cfg.class_weights:
        node_w = inverse_frequency_weights(
            np.concatenate([p.node_labels for p in preps]), params.dims.class_count)
        edge_w = inverse_frequency_weights(
            np.concatenate([p.edge_labels for p in preps]), params.dims.predicate_count)

    named = params.named_parameters()
    optim = Adam(named, cfg)
    rng = np.random.default_rng(cfg.seed)
    val_infer = InferenceConfig(
        cr_enabled=cfg.cr_in_training,
        neighbor_residual=infer_cfg.neighbor_residual,
        geo_max_points=infer_cfg.geo_max_points,
        lenient_views=infer_cfg.lenient_views,
    )

    result = TrainResult()
    best_state = {name: p.data.copy() for name, p in named}
    stall = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(preps))
        epoch_loss = 0.0
        n_scenes = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            params.zero_grads()
            used = 0
            for idx in batch:
                loss = _scene_backward(preps[idx], params, infer_cfg, cfg,
                                       node_w, edge_w, loss_stats, epoch)
                if loss is None:
                    continue
                epoch_loss += loss
                used += 1
            if used == 0:
                continue
            n_scenes += used
            for _, p in named:  # mean gradient over the batch
                if p.grad is not None:
                    p.grad /= used
            optim.step()
        mean_loss = epoch_loss / max(n_scenes, 1)

        val_recall = float("nan")
        if val_scenes:
            report = evaluate_corpus(val_scenes, params, val_infer,
                                     stats if cfg.cr_in_training else None)
            val_recall = report.recall_rel
        result.history.append({"epoch": epoch, "train_loss": mean_loss,
                               "val_recall_rel": val_recall})

        if not val_scenes or val_recall > result.best_val_recall:
            result.best_val_recall = val_recall
            result.best_epoch = epoch
            best_state = {name: p.data.copy() for name, p in named}
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
    for name, p in named:
        p.data = best_state[name]
    return result


def _scene_backward(prep: ScenePrep, params: ModelParams, infer_cfg: InferenceConfig,
                    cfg: TrainConfig, node_w, edge_w,
                    stats: CooccurrenceStats | None, epoch: int) -> float | None:
    try:
        with Tape() as tape:
            loss = scene_loss(prep, params, infer_cfg, lambda_pred=cfg.lambda_pred,
                              node_weights=node_w, edge_weights=edge_w, stats=stats)
            if loss is None:
                return None
            tape.backward(loss)
    except NonFiniteError as exc:
        raise DivergenceError(
            f"non-finite loss at epoch {epoch} on scene '{prep.scene_id}': {exc}") from exc
    return float(loss.data)
