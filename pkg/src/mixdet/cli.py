"""Command-line entry point.

Subcommands: gen-data, train, eval, candidates, match-debug, experiment,
plot-data. Exit codes: 0 success, 1 usage error, 2 runtime failure.
Training configuration comes from defaults, then an optional JSON config
file (or a run manifest), then ``--set dotted.path=value`` overrides, then
explicit flags; later sources win.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ._version import __version__
from .data import DatasetSpec, generate, load_scenes, save_scenes
from .experiments import ARM_BUILDERS, experiment_suite, format_table
from .losses import match_layer
from .matching import MatcherConfig
from .model import load_checkpoint
from .training import (
    TrainConfig,
    candidate_report,
    evaluate,
    images_to_tensor,
    train,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1 on usage problems, not 2
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _set_nested(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ValueError(f"unknown config path: {dotted}")
        node = node[key]
    if keys[-1] not in node:
        raise ValueError(f"unknown config path: {dotted}")
    node[keys[-1]] = value


def _parse_set_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_train_config(args) -> TrainConfig:
    """defaults < config file < --set overrides < explicit flags."""
    tree = TrainConfig().to_dict()
    if getattr(args, "config", None):
        with open(args.config) as handle:
            loaded = json.load(handle)
        if "config" in loaded and isinstance(loaded["config"], dict):
            loaded = loaded["config"]  # run manifest
        _merge(tree, loaded)
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        dotted, raw = pair.split("=", 1)
        _set_nested(tree, dotted, _parse_set_value(raw))
    flag_map = {
        "epochs": "epochs",
        "batch_size": "batch_size",
        "lr": "lr",
        "seed": "seed",
        "supervision": "supervision",
        "eval_interval": "eval_interval",
    }
    for attr, key in flag_map.items():
        if hasattr(args, attr):
            tree[key] = getattr(args, attr)
    for attr, key in (("top_k", "top_k"), ("tau", "tau"), ("alpha", "alpha")):
        if hasattr(args, attr):
            tree["matcher"][key] = getattr(args, attr)
    if hasattr(args, "variant"):
        tree["model"]["variant"] = args.variant
    if getattr(args, "train", None):
        tree["train_data"] = args.train
    if getattr(args, "val", None):
        tree["val_data"] = args.val
    return TrainConfig.from_dict(tree)


def _merge(tree: dict, update: dict) -> None:
    for key, value in update.items():
        if key not in tree:
            raise ValueError(f"unknown config key: {key}")
        if isinstance(tree[key], dict) and isinstance(value, dict):
            _merge(tree[key], value)
        else:
            tree[key] = value


def cmd_gen_data(args) -> int:
    spec = DatasetSpec(
        seed=args.seed,
        num_scenes=args.num_scenes,
        height=args.height,
        width=args.width,
        num_classes=args.num_classes,
        max_objects=args.max_objects,
        min_size=args.min_size,
        max_size=args.max_size,
        occlusion=args.occlusion,
        noise=args.noise,
    )
    scenes = generate(spec)
    save_scenes(scenes, args.out)
    total = sum(len(s.objects) for s in scenes)
    print(f"wrote {len(scenes)} scenes ({total} objects) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    if not cfg.train_data:
        raise ValueError("no training data given (use --train or the config file)")
    train_scenes = load_scenes(cfg.train_data)
    val_scenes = load_scenes(cfg.val_data) if cfg.val_data else None
    result = train(cfg, train_scenes, val_scenes, run_dir=args.out)
    print(f"trained {result.steps} steps; artifacts in {result.run_dir}")
    if result.final_eval is not None:
        print(f"final AP@0.5 {result.final_eval.ap50:.4f}  AP {result.final_eval.ap:.4f}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    scenes = load_scenes(args.data)
    report = evaluate(model, scenes, candidate_k=args.candidate_k)
    payload = json.dumps(report.to_json_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(payload)
    print(payload)
    return 0


def _overlay(scene, gts, candidates, scale: int = 4) -> Image.Image:
    u8 = np.clip(np.round(scene.image * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(u8, mode="RGB").resize(
        (u8.shape[1] * scale, u8.shape[0] * scale), Image.NEAREST
    )
    draw = ImageDraw.Draw(img)
    w, h = img.size

    def rect(box, color, width):
        x0, y0, x1, y1 = box
        draw.rectangle([x0 * w, y0 * h, x1 * w, y1 * h], outline=color, width=width)

    for cand in candidates:
        cx, cy, bw, bh = cand["box"]
        rect((cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2), (255, 80, 80), 1)
    for gt in gts:
        cx, cy, bw, bh = gt["box"]
        rect((cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2), (40, 255, 40), 2)
    return img


def cmd_candidates(args) -> int:
    model = load_checkpoint(args.checkpoint)
    scenes = load_scenes(args.data)
    if args.limit is not None:
        scenes = scenes[: args.limit]
    quality = candidate_report(model, scenes, k=args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for scene, dump in zip(scenes, quality.per_scene):
        stem = f"scene_{scene.scene_id:06d}"
        with open(out / f"{stem}.json", "w") as handle:
            json.dump(dump, handle, indent=2)
        all_candidates = [c for gt in dump["gts"] for c in gt["candidates"]]
        _overlay(scene, dump["gts"], all_candidates).save(out / f"{stem}.png")
    with open(out / "summary.json", "w") as handle:
        json.dump(
            {"mean_iou": quality.mean_iou, "median_iou": quality.median_iou, "k": quality.k},
            handle,
            indent=2,
        )
    print(f"candidate top-{args.k} mean IoU {quality.mean_iou:.4f} over {len(scenes)} scenes")
    return 0


def cmd_match_debug(args) -> int:
    model = load_checkpoint(args.checkpoint)
    scenes = load_scenes(args.data)
    by_id = {scene.scene_id: scene for scene in scenes}
    if args.scene_id is None:
        scene = scenes[0]
    elif args.scene_id in by_id:
        scene = by_id[args.scene_id]
    else:
        raise ValueError(f"scene id {args.scene_id} not in {args.data}")
    matcher = MatcherConfig(alpha=args.alpha, top_k=args.top_k, tau=args.tau)
    predictions = model(images_to_tensor([scene])).scene(0)
    layer_index = args.layer if args.layer is not None else predictions.num_layers - 1
    classes, boxes = scene.target_tensors()
    _, o2m = match_layer(
        predictions.layer_slice(layer_index), classes, boxes, matcher, need_o2m=True
    )
    assert o2m is not None
    payload = json.dumps(o2m.to_json_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(payload)
    print(payload)
    return 0


def cmd_experiment(args) -> int:
    cfg = resolve_train_config(args)
    if not cfg.train_data or not cfg.val_data:
        raise ValueError("experiment needs --train and --val archives")
    arms = tuple(arm.strip() for arm in args.arms.split(",") if arm.strip())
    unknown = [arm for arm in arms if arm not in ARM_BUILDERS]
    if unknown:
        raise ValueError(f"unknown arms {unknown}; known: {sorted(ARM_BUILDERS)}")
    seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    report = experiment_suite(
        cfg, arms=arms, seeds=seeds, out_dir=args.out,
        progress=lambda msg: print(msg, flush=True),
    )
    print(format_table(report))
    print(f"report written to {Path(args.out) / 'report.json'}")
    return 0


def cmd_plot_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for run in args.run:
        run_path = Path(run)
        parts = [p for p in run_path.parts if p not in ("/", ".", "..")]
        name = "_".join(parts[-2:]) if len(parts) >= 2 else (run_path.name or "run")
        train_log = run_path / "train_log.csv"
        if not train_log.exists():
            raise FileNotFoundError(f"missing {train_log}")
        with open(train_log, newline="") as handle:
            rows = list(csv.DictReader(handle))
        by_epoch: dict[int, list[dict]] = {}
        for row in rows:
            by_epoch.setdefault(int(row["epoch"]), []).append(row)
        with open(out / f"{name}_loss_curves.csv", "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["epoch", "m11_cls", "m11_reg"])
            for epoch in sorted(by_epoch):
                chunk = by_epoch[epoch]
                writer.writerow(
                    [
                        epoch,
                        float(np.mean([float(r["m11_cls"]) for r in chunk])),
                        float(np.mean([float(r["m11_reg"]) for r in chunk])),
                    ]
                )
        eval_log = run_path / "eval.csv"
        if eval_log.exists():
            with open(eval_log, newline="") as handle:
                eval_rows = list(csv.DictReader(handle))
            with open(out / f"{name}_ap_curve.csv", "w", newline="") as handle:
                writer = csv.writer(handle)
                writer.writerow(["epoch", "ap50", "ap75", "ap"])
                for row in eval_rows:
                    writer.writerow([row["epoch"], row["ap50"], row["ap75"], row["ap"]])
    print(f"curve data written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixdet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mixdet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    spec = DatasetSpec()
    matcher = MatcherConfig()
    cfg = TrainConfig()

    p = sub.add_parser("gen-data", help="generate a synthetic scene archive")
    p.add_argument("--seed", type=int, default=spec.seed)
    p.add_argument("--num-scenes", type=int, default=spec.num_scenes)
    p.add_argument("--out", required=True, help="output archive path (tar)")
    p.add_argument("--height", type=int, default=spec.height)
    p.add_argument("--width", type=int, default=spec.width)
    p.add_argument("--num-classes", type=int, default=spec.num_classes)
    p.add_argument("--max-objects", type=int, default=spec.max_objects)
    p.add_argument("--min-size", type=float, default=spec.min_size)
    p.add_argument("--max-size", type=float, default=spec.max_size)
    p.add_argument("--noise", type=float, default=spec.noise)
    p.add_argument("--occlusion", action="store_true", help="allow overlapping objects")
    p.set_defaults(func=cmd_gen_data)

    def add_config_flags(p, with_train_flags: bool = True):
        p.add_argument("--config", help="JSON config file or run manifest")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="dotted config override, e.g. --set matcher.top_k=4",
        )
        p.add_argument("--train", help="training archive path")
        p.add_argument("--val", help="validation archive path")
        if with_train_flags:
            sup = argparse.SUPPRESS
            p.add_argument("--epochs", type=int, default=sup, help=f"training epochs (default: {cfg.epochs})")
            p.add_argument("--batch-size", dest="batch_size", type=int, default=sup, help=f"batch size (default: {cfg.batch_size})")
            p.add_argument("--lr", type=float, default=sup, help=f"learning rate (default: {cfg.lr})")
            p.add_argument("--seed", type=int, default=sup, help=f"run seed (default: {cfg.seed})")
            p.add_argument("--supervision", choices=("mixed", "one_to_one"), default=sup, help=f"supervision mode (default: {cfg.supervision})")
            p.add_argument("--eval-interval", dest="eval_interval", type=int, default=sup, help=f"epochs between evals (default: {cfg.eval_interval})")
            p.add_argument("--top-k", dest="top_k", type=int, default=sup, help=f"one-to-many top K (default: {matcher.top_k})")
            p.add_argument("--tau", type=float, default=sup, help=f"match-score threshold (default: {matcher.tau})")
            p.add_argument("--alpha", type=float, default=sup, help=f"match-score class weight (default: {matcher.alpha})")
            p.add_argument("--variant", choices=("a", "b", "c", "d"), default=sup, help="decoder variant (default: c)")

    p = sub.add_parser("train", help="train a detector")
    add_config_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--candidate-k", dest="candidate_k", type=int, default=20)
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("candidates", help="per-scene candidate dumps and overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--limit", type=int, help="only the first N scenes")
    p.set_defaults(func=cmd_candidates)

    p = sub.add_parser("match-debug", help="dump a one-to-many assignment as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene-id", dest="scene_id", type=int)
    p.add_argument("--layer", type=int, help="decoder layer (default: last)")
    p.add_argument("--alpha", type=float, default=matcher.alpha)
    p.add_argument("--top-k", dest="top_k", type=int, default=matcher.top_k)
    p.add_argument("--tau", type=float, default=matcher.tau)
    p.add_argument("--out")
    p.set_defaults(func=cmd_match_debug)

    p = sub.add_parser("experiment", help="multi-seed comparison suite")
    add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--arms", default="baseline,mixed", help=f"comma list from {sorted(ARM_BUILDERS)}")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot-data", help="emit per-curve CSVs from run logs")
    p.add_argument("--run", action="append", required=True, help="run directory (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
