"""Batch entry points: gen, stats, train, eval, predict, ablate-stats.

All commands are deterministic under fixed seeds and exit non-zero with a
single machine-parsable ``ErrorClass: message`` line on stderr when anything
goes wrong.  Options can come from a flat ``key=value`` config file; a CLI
flag of the same name always wins.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import metrics, model, pipeline, rescore, scene, synthetic, train

logger = logging.getLogger("sg3d")


@dataclass
class RunConfig:
    h: int = 256
    layers: int = 2
    cr: bool = True
    fixed_alpha: float | None = None
    cr_edge_combine: str = "product"
    cr_neighbor_mode: str = "argmax"
    exclude_none: bool = False
    neighbor_residual: bool = True
    geo_max_points: int = 128
    lenient_views: bool = False
    lr: float = 1e-3
    epochs: int = 60
    patience: int = 8
    batch_size: int = 8
    lambda_pred: float = 1.0
    class_weights: bool = False
    cr_in_training: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.h <= 0 or self.layers <= 0:
            raise ValueError("h and layers must be positive")
        if self.fixed_alpha is not None and not 0.0 < self.fixed_alpha <= 1.0:
            raise ValueError(f"fixed_alpha must be in (0, 1], got {self.fixed_alpha}")

    def train_config(self) -> train.TrainConfig:
        return train.TrainConfig(lr=self.lr, epochs=self.epochs, patience=self.patience,
                                 batch_size=self.batch_size, lambda_pred=self.lambda_pred,
                                 class_weights=self.class_weights,
                                 cr_in_training=self.cr_in_training, seed=self.seed)

    def inference_config(self) -> pipeline.InferenceConfig:
        return pipeline.InferenceConfig(
            cr_enabled=self.cr, fixed_alpha=self.fixed_alpha,
            cr_edge_combine=self.cr_edge_combine, cr_neighbor_mode=self.cr_neighbor_mode,
            neighbor_residual=self.neighbor_residual, geo_max_points=self.geo_max_points,
            lenient_views=self.lenient_views)


class ConfigError(ValueError):
    """Config file or flag combination invalid."""


def _coerce(raw: str, target_type):
    if target_type is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got '{raw}'")
    if raw.lower() in ("none", "null"):
        return None
    return target_type(raw)


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    return values


_FIELD_TYPES = {"fixed_alpha": float}


def build_run_config(args) -> RunConfig:
    cfg = RunConfig()
    file_values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    known = {f.name: f for f in fields(RunConfig)}
    for key, raw in file_values.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
        target = _FIELD_TYPES.get(key, known[key].type)
        if isinstance(target, str):  # postponed annotations
            target = {"int": int, "float": float, "bool": bool, "str": str,
                      "float | None": float}.get(target, str)
        setattr(cfg, key, _coerce(raw, target))
    for key in known:
        flag = getattr(args, key, None)
        if flag is not None:
            setattr(cfg, key, flag)
    if getattr(args, "no_cr", False):
        cfg.cr = False
    cfg.validate()
    return cfg


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--h", type=int, default=None, help="hidden width")
    parser.add_argument("--layers", type=int, default=None)
    parser.add_argument("--no-cr", action="store_true",
                        help="disable confidence rescoring")
    parser.add_argument("--fixed-alpha", dest="fixed_alpha", type=float, default=None)
    parser.add_argument("--exclude-none", dest="exclude_none",
                        action="store_const", const=True, default=None)
    parser.add_argument("--cr-edge-combine", dest="cr_edge_combine",
                        choices=("product", "sum"), default=None)
    parser.add_argument("--no-neighbor-residual", dest="neighbor_residual",
                        action="store_const", const=False, default=None)
    parser.add_argument("--geo-max-points", dest="geo_max_points", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--patience", type=int, default=None)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--lambda-pred", dest="lambda_pred", type=float, default=None)
    parser.add_argument("--class-weights", dest="class_weights",
                        action="store_const", const=True, default=None)
    parser.add_argument("--cr-in-training", dest="cr_in_training",
                        action="store_const", const=True, default=None)


def cmd_gen(args) -> int:
    gen_cfg = synthetic.GenConfig(
        seed=args.seed, class_count=args.classes, predicate_count=args.predicates,
        feature_dim=args.feature_dim, scenes=args.scenes,
        nodes_min=args.nodes_min, nodes_max=args.nodes_max,
        edge_radius=args.edge_radius, feature_noise=args.noise,
        contamination_mode=args.contamination_mode,
        contamination_max=args.contamination_max, mask_quality=args.mask_quality,
        predicate_concentration=args.concentration, contexts=args.contexts)
    shared = synthetic.load_model(args.use_model) if args.use_model else None
    synthetic.gen_corpus(gen_cfg, args.out, model=shared)
    logger.info("wrote %d scenes to %s", args.scenes, args.out)
    return 0


def cmd_stats(args) -> int:
    scenes = scene.load_corpus(args.corpus)
    stats = rescore.compute_stats(scenes, epsilon=args.epsilon)
    rescore.save_stats(stats, args.out)
    logger.info("stats over %d edges -> %s", int(stats.triplet.sum()), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = build_run_config(args)
    train_scenes = scene.load_corpus(args.corpus)
    val_scenes = scene.load_corpus(args.val_corpus) if args.val_corpus else []
    dims = model.ModelDims(
        feature_dim=train_scenes[0].feature_dim, hidden=cfg.h, layers=cfg.layers,
        class_count=len(train_scenes[0].classes),
        predicate_count=len(train_scenes[0].predicates))
    params = model.init_params(dims, seed=cfg.seed)
    stats = rescore.load_stats(args.stats) if args.stats else None
    result = train.train(train_scenes, val_scenes, params, cfg.train_config(),
                         infer_cfg=cfg.inference_config(), stats=stats)
    model.save_checkpoint(params, args.out, config_echo={
        "h": cfg.h, "layers": cfg.layers, "seed": cfg.seed,
        "neighbor_residual": cfg.neighbor_residual,
        "geo_max_points": cfg.geo_max_points,
        "best_epoch": result.best_epoch})
    if args.history:
        Path(args.history).write_text(json.dumps(result.history, indent=1) + "\n")
    logger.info("best val recall %.4f at epoch %d", result.best_val_recall,
                result.best_epoch)
    return 0


def _load_eval_inputs(args, cfg: RunConfig):
    scenes = scene.load_corpus(args.corpus)
    params, header = model.load_checkpoint(args.checkpoint)
    echo = header.get("config", {})
    if "neighbor_residual" in echo and getattr(args, "neighbor_residual", None) is None:
        cfg.neighbor_residual = bool(echo["neighbor_residual"])
    if "geo_max_points" in echo and getattr(args, "geo_max_points", None) is None:
        cfg.geo_max_points = int(echo["geo_max_points"])
    stats = None
    if cfg.cr:
        if not args.stats:
            raise ConfigError("rescoring enabled but no --stats file given "
                              "(use --no-cr to evaluate without it)")
        stats = rescore.load_stats(args.stats)
        stats.check_vocab(scenes[0].classes, scenes[0].predicates)
    return scenes, params, stats


def cmd_eval(args) -> int:
    cfg = build_run_config(args)
    scenes, params, stats = _load_eval_inputs(args, cfg)
    report = pipeline.evaluate_corpus(scenes, params, cfg.inference_config(), stats,
                                      exclude_none=cfg.exclude_none)
    if args.out:
        report.save(args.out)
    print(report.table())
    return 0


def cmd_predict(args) -> int:
    cfg = build_run_config(args)
    target = scene.load_scene(args.scene)
    params, header = model.load_checkpoint(args.checkpoint)
    echo = header.get("config", {})
    if "neighbor_residual" in echo:
        cfg.neighbor_residual = bool(echo["neighbor_residual"])
    stats = None
    if cfg.cr:
        if not args.stats:
            raise ConfigError("rescoring enabled but no --stats file given")
        stats = rescore.load_stats(args.stats)
    pred = pipeline.predict_scene(target, params, cfg.inference_config(), stats)
    doc = {
        "scene_id": pred.scene_id,
        "nodes": [{
            "node_id": nid,
            "class": target.classes[int(pred.node_classes[k])],
            "confidence": float(pred.node_confidences[k]),
            "distribution": pred.node_refined[k].tolist(),
            **({"base_distribution": pred.node_base[k].tolist()} if pred.cr_applied else {}),
        } for k, nid in enumerate(pred.node_ids)],
        "edges": [{
            "src": src, "dst": dst,
            "predicate": target.predicates[int(pred.edge_classes[k])],
            "confidence": float(pred.edge_confidences[k]),
            "distribution": pred.edge_refined[k].tolist(),
            **({"base_distribution": pred.edge_base[k].tolist()} if pred.cr_applied else {}),
        } for k, (src, dst) in enumerate(pred.edge_pairs)],
    }
    out = json.dumps(doc, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(out)
    else:
        print(out, end="")
    return 0


def cmd_ablate_stats(args) -> int:
    stats = rescore.load_stats(args.stats)
    out = rescore.ablate_stats(stats, args.drop_top_frac)
    rescore.save_stats(out, args.out)
    logger.info("kept %d of %d triplet counts", int(out.triplet.sum()),
                int(stats.triplet.sum()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sg3d", description="scene graph estimation over precomputed view features")
    parser.add_argument("--log", help="append log lines (with timestamps) to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--predicates", type=int, default=5)
    p.add_argument("--feature-dim", dest="feature_dim", type=int, default=32)
    p.add_argument("--nodes-min", dest="nodes_min", type=int, default=4)
    p.add_argument("--nodes-max", dest="nodes_max", type=int, default=9)
    p.add_argument("--edge-radius", dest="edge_radius", type=float, default=3.0)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--contamination-mode", dest="contamination_mode",
                   choices=("bbox", "mask"), default="bbox")
    p.add_argument("--contamination-max", dest="contamination_max", type=float, default=0.5)
    p.add_argument("--mask-quality", dest="mask_quality", type=float, default=0.8)
    p.add_argument("--concentration", type=float, default=0.25)
    p.add_argument("--contexts", type=int, default=4)
    p.add_argument("--use-model", dest="use_model",
                   help="draw scenes from an existing model.json instead of a new world")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stats", help="compute co-occurrence statistics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--val-corpus", dest="val_corpus")
    p.add_argument("--stats", help="needed only with cr_in_training")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="write per-epoch history JSON here")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats")
    p.add_argument("--out")
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict one scene graph")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats")
    p.add_argument("--out")
    _add_run_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate-stats", help="drop the most frequent triplet mass")
    p.add_argument("--stats", required=True)
    p.add_argument("--drop-top-frac", dest="drop_top_frac", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = [logging.StreamHandler(sys.stderr)]
    if args.log:
        handlers.append(logging.FileHandler(args.log))
    logging.basicConfig(level=logging.INFO, handlers=handlers,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single machine-parsable error line
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
