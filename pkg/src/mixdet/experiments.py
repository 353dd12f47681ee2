"""Scripted multi-seed comparisons.

The suite trains a set of named arms over a set of seeds and reports, per
run, the final AP numbers, the final-epoch one-to-one loss components
(measured identically in every arm), and candidate quality. When both the
``baseline`` and ``mixed`` arms are present, the summary also carries the
per-seed paired deltas. Nothing here asserts an ordering; the report is
for downstream checks and plots.
"""

from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Scene, load_scenes
from .model import variant_config
from .training import TrainConfig, train


def _with_variant(cfg: TrainConfig, letter: str) -> TrainConfig:
    return replace(cfg, supervision="mixed", model=variant_config(cfg.model, letter))


def _with_sharing(cfg: TrainConfig, share_cls: bool, share_box: bool) -> TrainConfig:
    model = replace(cfg.model, share_cls_head=share_cls, share_box_head=share_box)
    return replace(cfg, supervision="mixed", model=model)


ARM_BUILDERS: dict[str, Callable[[TrainConfig], TrainConfig]] = {
    "baseline": lambda cfg: replace(cfg, supervision="one_to_one"),
    "mixed": lambda cfg: replace(cfg, supervision="mixed"),
    "variant_a": lambda cfg: _with_variant(cfg, "a"),
    "variant_b": lambda cfg: _with_variant(cfg, "b"),
    "variant_c": lambda cfg: _with_variant(cfg, "c"),
    "variant_d": lambda cfg: _with_variant(cfg, "d"),
    "share_both": lambda cfg: _with_sharing(cfg, True, True),
    "share_cls": lambda cfg: _with_sharing(cfg, True, False),
    "share_box": lambda cfg: _with_sharing(cfg, False, True),
    "share_none": lambda cfg: _with_sharing(cfg, False, False),
}

TABLE_COLUMNS = (
    "arm",
    "seed",
    "ap50",
    "ap75",
    "ap",
    "m11_cls_final",
    "m11_reg_final",
    "cls_o2m_final",
    "cand_mean_iou",
)


def arm_config(base: TrainConfig, arm: str, seed: int) -> TrainConfig:
    if arm not in ARM_BUILDERS:
        raise ValueError(f"unknown arm {arm!r}; known arms: {sorted(ARM_BUILDERS)}")
    return replace(ARM_BUILDERS[arm](base), seed=seed)


def experiment_suite(
    base: TrainConfig,
    arms: tuple[str, ...] = ("baseline", "mixed"),
    seeds: tuple[int, ...] = (0, 1, 2),
    out_dir: str | Path | None = None,
    train_scenes: list[Scene] | None = None,
    val_scenes: list[Scene] | None = None,
    progress: Callable[[str], None] | None = None,
) -> dict:
    """Run arms x seeds and build the comparison report."""
    if train_scenes is None:
        train_scenes = load_scenes(base.train_data)
    if val_scenes is None:
        if not base.val_data:
            raise ValueError("the experiment suite needs a validation set")
        val_scenes = load_scenes(base.val_data)

    out_path = Path(out_dir) if out_dir is not None else None
    rows: list[dict] = []
    for arm in arms:
        for seed in seeds:
            cfg = arm_config(base, arm, seed)
            run_dir = out_path / arm / f"seed{seed}" if out_path else None
            if progress:
                progress(f"running {arm} seed {seed} ...")
            result = train(cfg, train_scenes, val_scenes, run_dir)
            report = result.final_eval
            assert report is not None
            rows.append(
                {
                    "arm": arm,
                    "seed": seed,
                    "ap50": report.ap50,
                    "ap75": report.ap75,
                    "ap": report.ap,
                    "m11_cls_final": result.final_epoch_means["m11_cls"],
                    "m11_reg_final": result.final_epoch_means["m11_reg"],
                    "cls_o2m_final": result.final_epoch_means["cls_o2m"],
                    "cand_mean_iou": report.candidate_mean_iou,
                }
            )

    report = {"arms": list(arms), "seeds": list(seeds), "runs": rows, "summary": _summary(rows)}
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        with open(out_path / "report.json", "w") as handle:
            json.dump(report, handle, indent=2)
        with open(out_path / "table.csv", "w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(TABLE_COLUMNS))
            writer.writeheader()
            writer.writerows(rows)
    return report


def _summary(rows: list[dict]) -> dict:
    arms: dict[str, dict] = {}
    for row in rows:
        arms.setdefault(row["arm"], []).append(row)
    arm_stats = {
        arm: {
            metric: float(np.mean([r[metric] for r in arm_rows]))
            for metric in ("ap50", "ap75", "ap", "m11_cls_final", "m11_reg_final", "cand_mean_iou")
        }
        for arm, arm_rows in arms.items()
    }
    summary: dict = {"arm_means": arm_stats}
    if "baseline" in arms and "mixed" in arms:
        base_by_seed = {r["seed"]: r for r in arms["baseline"]}
        mixed_by_seed = {r["seed"]: r for r in arms["mixed"]}
        shared = sorted(set(base_by_seed) & set(mixed_by_seed))
        deltas = {
            metric: {
                seed: mixed_by_seed[seed][metric] - base_by_seed[seed][metric]
                for seed in shared
            }
            for metric in ("ap50", "ap", "m11_cls_final", "m11_reg_final", "cand_mean_iou")
        }
        summary["mixed_vs_baseline"] = {
            "per_seed": deltas,
            "means": {metric: float(np.mean(list(vals.values()))) for metric, vals in deltas.items()},
        }
    return summary


def format_table(report: dict) -> str:
    """Plain-text view of the comparison table."""
    lines = ["  ".join(f"{c:>14}" for c in TABLE_COLUMNS)]
    for row in report["runs"]:
        cells = []
        for column in TABLE_COLUMNS:
            value = row[column]
            cells.append(f"{value:>14.4f}" if isinstance(value, float) else f"{value!s:>14}")
        lines.append("  ".join(cells))
    return "\n".join(lines)
