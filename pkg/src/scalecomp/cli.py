"""Command-line entry points: gen-data, stats, train, eval, visualize.

Exit codes: 0 success, 2 configuration/schema error, 3 runtime error such as a
nonfinite training loss. Every command that writes artifacts echoes its
effective config into the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as ckpt
from .config import RunConfig, config_to_dict, echo_config, load_config
from .data import (
    Box,
    Dataset,
    generate_synthetic,
    load_annotations,
    save_dataset,
    scale_variation_stats,
)
from .detector import (
    Detection,
    ModelConfig,
    TrainConfig,
    build_model,
    infer,
    train,
)
from .errors import ConfigError, SchemaError, TrainingError
from .metrics import evaluate
from .visualize import feature_heatmaps


def _parse_overrides(pairs: list[str]) -> dict:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects section.key=value, got '{pair}'")
        key, raw = pair.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(raw)
    return overrides


def _load_run_config(args) -> RunConfig:
    return load_config(getattr(args, "config", None),
                       _parse_overrides(getattr(args, "set", None)))


def _resolve_annotations(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        return p / "annotations.json"
    return p


def _model_from_checkpoint(path: str):
    arrays, meta = ckpt.load_arrays(path)
    raw = meta.get("model", {})
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    kwargs = {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in raw.items()
        if k in fields
    }
    model = build_model(ModelConfig(**kwargs), seed=0)
    ckpt.load_model(path, model)
    return model, meta


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    if args.images is not None:
        cfg.data.num_images = args.images
    if args.image_size is not None:
        cfg.data.image_size = args.image_size
    cfg.data.validate()
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    dataset = generate_synthetic(cfg.data, args.seed)
    save_dataset(dataset, out)
    echo_config(cfg, out)
    print(f"wrote {len(dataset.samples)} images to {out}")
    return 0


def cmd_stats(args) -> int:
    cfg = _load_run_config(args)
    dataset = load_annotations(_resolve_annotations(args.data))
    per_category = args.per_category or cfg.eval.stats_per_category
    stats = scale_variation_stats(dataset, per_category=per_category)
    print(json.dumps(
        {
            "fraction_gt_2x": stats.fraction_gt_2x,
            "num_images_counted": len(stats.per_image_ratio),
            "per_image_ratio": stats.per_image_ratio,
        },
        indent=2,
    ))
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.disable_cscl:
        cfg.model.use_cscl = False
    if args.disable_iccl:
        cfg.model.use_iccl = False
    cfg.train.validate()
    dataset = load_annotations(_resolve_annotations(args.data))
    cfg.model.num_categories = dataset.num_categories
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    model = build_model(cfg.model, seed=cfg.train.seed)
    history = train(model, dataset, cfg.train, log_path=out / "train_log.jsonl",
                    progress_every=args.progress_every)
    meta = {"model": config_to_dict(cfg)["model"], "train": config_to_dict(cfg)["train"]}
    ckpt.save_model(out / "checkpoint.bin", model, meta)
    print(f"final l_total={history[-1].l_total:.4f} "
          f"(checkpoint: {out / 'checkpoint.bin'})")
    return 0


def _load_detections_file(path: str, dataset: Dataset) -> dict[int, list[Detection]]:
    raw = json.loads(Path(path).read_text())
    records = raw["detections"] if isinstance(raw, dict) else raw
    known = {s.id for s in dataset.samples}
    out: dict[int, list[Detection]] = {img_id: [] for img_id in known}
    for i, rec in enumerate(records):
        for key in ("image_id", "category_id", "bbox", "score"):
            if key not in rec:
                raise SchemaError(f"detection #{i}: missing key '{key}'")
        if rec["image_id"] not in known:
            raise SchemaError(f"detection #{i}: unknown image_id {rec['image_id']}")
        x, y, w, h = (float(v) for v in rec["bbox"])
        out[rec["image_id"]].append(
            Detection(box=Box.from_corner_size(x, y, w, h),
                      category_id=int(rec["category_id"]),
                      score=float(rec["score"]))
        )
    return out


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    dataset = load_annotations(_resolve_annotations(args.data))
    gts = {s.id: s.annotations for s in dataset.samples}
    if args.detections_file:
        detections = _load_detections_file(args.detections_file, dataset)
    elif args.checkpoint:
        model, meta = _model_from_checkpoint(args.checkpoint)
        train_meta = meta.get("train", {})
        fields = {f.name for f in dataclasses.fields(TrainConfig)}
        run_cfg = TrainConfig(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in train_meta.items()
            if k in fields
        })
        detections = {
            s.id: infer(s.pixels, model, run_cfg) for s in dataset.samples
        }
    else:
        raise ConfigError("eval needs --checkpoint or --detections-file")
    report = evaluate(
        detections, gts,
        interpolation=cfg.eval.interpolation,
        falarm_iou=cfg.eval.falarm_iou,
        falarm_score=cfg.eval.falarm_score,
    )
    print(report.to_json())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "metrics.json")
        echo_config(cfg, out)
    return 0


def cmd_visualize(args) -> int:
    cfg = _load_run_config(args)
    dataset = load_annotations(_resolve_annotations(args.data))
    by_id = {s.id: s for s in dataset.samples}
    if args.index not in by_id:
        raise ConfigError(f"image id {args.index} not in dataset")
    model, _meta = _model_from_checkpoint(args.checkpoint)
    out = Path(args.out)
    files = feature_heatmaps(model, by_id[args.index], out,
                             include_scale_maps=args.scale_maps)
    echo_config(cfg, out)
    print(f"wrote {len(files)} heatmaps to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scalecomp",
        description="Scale-complementary detector: data, training, metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("stats", help="scale-variation statistics of a dataset")
    common(p)
    p.add_argument("--data", required=True, help="annotations.json or its directory")
    p.add_argument("--per-category", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a detector")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--disable-cscl", action="store_true",
                   help="ablation: drop the scale-complement decoder and loss")
    p.add_argument("--disable-iccl", action="store_true",
                   help="ablation: drop the contrastive complement branch")
    p.add_argument("--progress-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate detections against a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--detections-file",
                   help="JSON detections to score instead of running the model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="write feature heatmap PNGs")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="image id to render")
    p.add_argument("--out", required=True)
    p.add_argument("--scale-maps", action="store_true",
                   help="also write predicted scale maps per level")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        if exc.breakdown is not None:
            print(json.dumps(exc.breakdown.as_dict(), indent=2), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
