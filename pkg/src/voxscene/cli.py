"""Command-line entry point: prepare, train, classify, evaluate, area.

Settings come from a JSON file of flat dotted keys (nested objects are flattened),
then command-line flags override them. Relative paths in the file are resolved
against the file's directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .augment import AugmentConfig
from .cloud import LabeledCloud, LabelMapping, PlyError, load_ply, remap_labels, save_ply
from .evaluation import classify_cloud, confusion, metrics, report_csv, report_table
from .network import load_checkpoint
from .spatial import covered_area, grid_subsample
from .trainer import OptimizerConfig, TrainConfig, latest_checkpoint, train

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed", "workers", "augment", "optimizer",
                                                        "checkpoint_dir"}

DEFAULTS: dict = {
    "seed": 0,
    "workers": 1,
    "checkpoint_dir": "checkpoints",
    "data.train": [],
    "data.label_property": "class",
    "prepare.cell": 0.02,
    "prepare.mapping": None,
    "classify.cell": 0.1,
    "classify.batch_size": 64,
    "evaluate.class_names": None,
    "area.pixel": 0.1,
}
DEFAULTS.update({f"train.{k}": v for k, v in TrainConfig().to_dict().items() if k in _TRAIN_KEYS})
DEFAULTS.update({f"augment.{k}": v for k, v in AugmentConfig().to_dict().items()})
DEFAULTS.update({f"optimizer.{f.name}": f.default for f in fields(OptimizerConfig)})

_PATH_KEYS = {"checkpoint_dir", "data.train", "prepare.mapping"}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path=None) -> dict:
    cfg = dict(DEFAULTS)
    if path is None:
        return cfg
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        raw = _flatten(json.load(f))
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    for k in _PATH_KEYS & set(raw):
        v = raw[k]
        if v is None:
            continue
        resolve = lambda p: str(Path(p) if Path(p).is_absolute() else path.parent / p)
        raw[k] = [resolve(p) for p in v] if isinstance(v, list) else resolve(v)
    cfg.update(raw)
    return cfg


def _scales(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty scale list")
    return vals


def apply_flags(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = dict(cfg)
    direct = {"seed": "seed", "workers": "workers", "checkpoint_dir": "checkpoint_dir",
              "n_per_class": "train.n_per_class", "scales": "train.deltas", "grid_n": "train.grid_n",
              "epochs": "train.epochs", "batch_size": "train.batch_size"}
    for attr, key in direct.items():
        v = getattr(args, attr, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "cell", None) is not None:
        cfg[{"area": "area.pixel"}.get(args.command, f"{args.command}.cell")] = args.cell
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    kw = {k: cfg[f"train.{k}"] for k in _TRAIN_KEYS}
    aug = AugmentConfig.from_dict({k[8:]: v for k, v in cfg.items() if k.startswith("augment.")})
    opt = OptimizerConfig(**{k[10:]: v for k, v in cfg.items() if k.startswith("optimizer.")})
    return TrainConfig(seed=int(cfg["seed"]), workers=int(cfg["workers"]),
                       checkpoint_dir=cfg["checkpoint_dir"], augment=aug, optimizer=opt, **kw)


def _load(path, label_property, required: bool = True) -> LabeledCloud:
    try:
        return load_ply(path, label_property)
    except PlyError as exc:
        # label-free clouds are valid input where labels are optional
        if required or label_property is None or "label property" not in str(exc):
            raise
    return load_ply(path, None)


def cmd_prepare(args, cfg) -> int:
    mapping = LabelMapping.from_json(cfg["prepare.mapping"]) if cfg["prepare.mapping"] else None
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prop = cfg["data.label_property"]
    for p in args.inputs:
        cloud = _load(p, prop, required=mapping is not None)
        if mapping is not None:
            cloud = remap_labels(cloud, mapping)
        sub = grid_subsample(cloud, float(cfg["prepare.cell"])).cloud
        save_ply(sub, out_dir / Path(p).name)
        print(f"{Path(p).name}: points_in={len(cloud)} points_out={len(sub)}")
        print(f"area_m2={covered_area(cloud, float(cfg['area.pixel'])):.2f}")
    return 0


def cmd_train(args, cfg) -> int:
    paths = args.inputs or cfg["data.train"]
    if not paths:
        raise ValueError("no training clouds given (positional inputs or data.train)")
    clouds = [_load(p, cfg["data.label_property"]) for p in paths]
    config = train_config(cfg)
    result = train(clouds, config, resume=args.resume)
    last = result.history[-1]
    print(f"epoch={last.epoch} mean_loss={last.mean_loss:.6f} "
          f"balanced_accuracy={last.balanced_accuracy:.6f}")
    print(f"checkpoint={latest_checkpoint(config.checkpoint_dir)}")
    return 0


def resolve_checkpoint(path) -> Path:
    p = Path(path)
    if (p / "meta.json").exists():
        return p
    last = latest_checkpoint(p) if p.is_dir() else None
    if last is None:
        raise FileNotFoundError(f"no checkpoint found in {p}")
    return last


def cmd_classify(args, cfg) -> int:
    ck = resolve_checkpoint(args.checkpoint or cfg["checkpoint_dir"])
    net, store, _, record = load_checkpoint(ck)
    cloud = _load(args.input, None)
    pred = classify_cloud(net, store, cloud, float(cfg["classify.cell"]),
                          int(cfg["classify.batch_size"]), int(cfg["workers"]))
    table = {int(k): v for k, v in record.get("class_table", {}).items()}
    if len(table) != net.spec.n_classes:
        table = {i: f"class_{i}" for i in range(net.spec.n_classes)}
    save_ply(cloud.with_labels(pred, table), args.out)
    print(f"classified {len(cloud)} points with {ck}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    prop = cfg["data.label_property"]
    pred = _load(args.pred, prop)
    gt = _load(args.gt, args.gt_label_property or prop)
    if len(pred) != len(gt):
        raise ValueError(f"prediction has {len(pred)} points, ground truth has {len(gt)}")
    names = cfg["evaluate.class_names"]
    n = args.n_classes or max(pred.n_classes, gt.n_classes, len(names or ()))
    if names and len(names) != n:
        raise ValueError(f"{len(names)} class names for {n} classes")
    m = metrics(confusion(pred.labels, gt.labels, n))
    print(report_table(m, names))
    if args.csv:
        Path(args.csv).write_text(report_csv(m, names), encoding="utf-8")
    return 0


def cmd_area(args, cfg) -> int:
    for p in args.inputs:
        a = covered_area(_load(p, None), float(cfg["area.pixel"]))
        print(f"{Path(p).name}: area_m2={a:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with dotted keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--cell", type=float, help="grid cell in meters (pixel size for area)")
    common.add_argument("--n-per-class", type=int)
    common.add_argument("--scales", type=_scales, help="comma list of voxel sizes in meters")
    common.add_argument("--grid-n", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--checkpoint-dir")
    common.add_argument("--log-level", default="WARNING")

    ap = argparse.ArgumentParser(prog="voxscene", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("prepare", parents=[common], help="subsample and remap clouds")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mapping", help="label mapping JSON")
    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p = sub.add_parser("classify", parents=[common], help="label every point of a cloud")
    p.add_argument("input")
    p.add_argument("--checkpoint", help="checkpoint directory (or a run directory)")
    p.add_argument("--out", required=True)
    p = sub.add_parser("evaluate", parents=[common], help="compare predicted and true labels")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--gt-label-property")
    p.add_argument("--n-classes", type=int)
    p.add_argument("--csv", help="also write the report as CSV")
    p = sub.add_parser("area", parents=[common], help="covered ground area of clouds")
    p.add_argument("inputs", nargs="+")
    return ap


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "classify": cmd_classify,
            "evaluate": cmd_evaluate, "area": cmd_area}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s")
    try:
        cfg = apply_flags(load_config(args.config), args)
        if getattr(args, "mapping", None):
            cfg["prepare.mapping"] = args.mapping
        return COMMANDS[args.command](args, cfg)
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
