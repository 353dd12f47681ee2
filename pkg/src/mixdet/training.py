"""Training loop, evaluation entry points, and run artifacts.

A run directory holds:

* ``losses.csv``      step/layer loss terms (columns from losses.CSV_COLUMNS)
* ``train_log.csv``   one row per step with the one-to-one loss measurements
                      that both baseline and mixed runs log identically
* ``eval.csv``        one row per validation pass (AP + candidate quality)
* ``checkpoint.pt``   final parameters with the model config embedded
* ``manifest.json``   resolved config snapshot, artifact paths, version
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ._version import __version__
from .data import Scene, load_scenes
from .losses import CSV_COLUMNS, LossConfig, batched_losses
from .matching import MatcherConfig
from .metrics import (
    EvalReport,
    SceneGroundTruth,
    ScenePredictions,
    candidate_quality,
    evaluate_predictions,
)
from .model import Detector, ModelConfig, box_merge_applies, save_checkpoint

SUPERVISION_MODES = ("mixed", "one_to_one")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_breakdown: dict[str, float] | None):
        self.step = step
        self.last_breakdown = last_breakdown
        super().__init__(
            f"non-finite loss at step {step}; last finite breakdown: {last_breakdown}"
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 6e-4
    warmup_steps: int = 100
    weight_decay: float = 1e-4
    grad_clip_norm: float = 0.1
    seed: int = 0
    supervision: str = "mixed"
    model: ModelConfig = field(default_factory=ModelConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train_data: str = ""
    val_data: str = ""
    eval_interval: int = 2
    candidate_k: int = 20
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.supervision not in SUPERVISION_MODES:
            raise ValueError(f"supervision must be one of {SUPERVISION_MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["model"] = self.model.to_dict()
        data["matcher"] = asdict(self.matcher)
        data["loss"] = asdict(self.loss)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "model" in data:
            data["model"] = ModelConfig.from_dict(data["model"])
        if "matcher" in data:
            data["matcher"] = MatcherConfig(**data["matcher"])
        if "loss" in data:
            data["loss"] = LossConfig(**data["loss"])
        return cls(**data)


@dataclass
class TrainResult:
    run_dir: Path | None
    checkpoint_path: Path | None
    model: Detector
    final_eval: EvalReport | None
    final_epoch_means: dict[str, float]
    steps: int


def images_to_tensor(scenes: list[Scene]) -> torch.Tensor:
    stacked = np.stack([scene.image for scene in scenes])
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


def scene_ground_truths(scenes: list[Scene]) -> list[SceneGroundTruth]:
    out = []
    for scene in scenes:
        classes = np.array([c for c, _ in scene.objects], dtype=np.int64)
        boxes = np.array([b.as_tuple() for _, b in scene.objects], dtype=np.float64).reshape(
            len(scene.objects), 4
        )
        out.append(SceneGroundTruth(classes=classes, boxes=boxes))
    return out


def predict_scenes(
    model: Detector, scenes: list[Scene], batch_size: int = 64
) -> list[ScenePredictions]:
    """Final-layer detections for every scene, batched, gradient-free."""
    model.eval()
    out: list[ScenePredictions] = []
    with torch.no_grad():
        for start in range(0, len(scenes), batch_size):
            batch = scenes[start : start + batch_size]
            detections = model.predict(images_to_tensor(batch))
            for i in range(len(batch)):
                out.append(
                    ScenePredictions(
                        scores=detections.scores[i].numpy().astype(np.float64),
                        boxes=detections.boxes[i].numpy().astype(np.float64),
                    )
                )
    return out


def evaluate(model: Detector, scenes: list[Scene], candidate_k: int = 20) -> EvalReport:
    """AP + candidate-quality report of a model on a scene list."""
    if not scenes:
        raise ValueError("cannot evaluate an empty dataset")
    predictions = predict_scenes(model, scenes)
    ground_truths = scene_ground_truths(scenes)
    return evaluate_predictions(
        predictions, ground_truths, model.config.num_classes, candidate_k=candidate_k
    )


class _CsvLog:
    def __init__(self, path: Path | None, columns: tuple[str, ...]):
        self.columns = columns
        self.rows: list[dict] = []
        self._file = None
        self._writer = None
        if path is not None:
            self._file = open(path, "w", newline="")
            self._writer = csv.DictWriter(self._file, fieldnames=list(columns))
            self._writer.writeheader()

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow(row)
            self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()


def train(
    cfg: TrainConfig,
    train_scenes: list[Scene],
    val_scenes: list[Scene] | None = None,
    run_dir: str | Path | None = None,
) -> TrainResult:
    """Optimize a detector; deterministic for a fixed config and seed."""
    if not train_scenes:
        raise ValueError("training set is empty")
    if cfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)

    run_path: Path | None = None
    if run_dir is not None:
        run_path = Path(run_dir)
        run_path.mkdir(parents=True, exist_ok=True)

    model = Detector(cfg.model)
    model.train()
    merged_box = box_merge_applies(cfg.model)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )

    targets = [scene.target_tensors() for scene in train_scenes]
    for _, boxes in targets:
        if boxes.shape[0] > cfg.model.num_queries:
            raise ValueError("a scene has more objects than the model has queries")

    loss_log = _CsvLog(run_path / "losses.csv" if run_path else None, CSV_COLUMNS)
    train_log = _CsvLog(
        run_path / "train_log.csv" if run_path else None,
        ("step", "epoch", "loss", "m11_cls", "m11_l1", "m11_giou", "m11_reg", "o2m_per_gt"),
    )
    eval_log = _CsvLog(
        run_path / "eval.csv" if run_path else None,
        ("epoch", "step", "ap50", "ap75", "ap", "cand_mean_iou", "cand_median_iou"),
    )

    step = 0
    last_breakdown: dict[str, float] | None = None
    final_eval: EvalReport | None = None
    final_epoch_rows: list[dict] = []
    try:
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng([cfg.seed, 1000 + epoch])
            order = rng.permutation(len(train_scenes))
            for start in range(0, len(order), cfg.batch_size):
                indices = order[start : start + cfg.batch_size]
                batch = [train_scenes[i] for i in indices]
                predictions = model(images_to_tensor(batch))
                with torch.no_grad():
                    finite = all(
                        bool(torch.isfinite(t).all())
                        for t in (predictions.o2o_logits, predictions.o2o_boxes,
                                  predictions.o2m_logits, predictions.o2m_boxes)
                    )
                if not finite:
                    raise TrainingDiverged(step, last_breakdown)

                breakdown, measured = batched_losses(
                    predictions, [targets[i] for i in indices],
                    cfg.loss, cfg.matcher, cfg.supervision, merged_box,
                )
                batch_loss = breakdown.total

                if not torch.isfinite(batch_loss):
                    raise TrainingDiverged(step, last_breakdown)

                if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
                    scale = (step + 1) / cfg.warmup_steps
                    for group in optimizer.param_groups:
                        group["lr"] = cfg.lr * scale
                elif step == cfg.warmup_steps:
                    for group in optimizer.param_groups:
                        group["lr"] = cfg.lr

                optimizer.zero_grad()
                batch_loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
                optimizer.step()

                rows = breakdown.to_rows(step)
                for row in rows:
                    loss_log.write(row)
                last_breakdown = {
                    k: v for k, v in rows[-1].items() if k not in ("step", "layer")
                }
                train_row = {
                    "step": step,
                    "epoch": epoch,
                    "loss": float(batch_loss.detach()),
                    "m11_cls": measured["cls"],
                    "m11_l1": measured["l1"],
                    "m11_giou": measured["giou"],
                    "m11_reg": measured["reg"],
                    "o2m_per_gt": measured["o2m_per_gt"],
                }
                train_log.write(train_row)
                if epoch == cfg.epochs - 1:
                    final_epoch_rows.append({**train_row, "cls_o2m": rows[-1]["cls_o2m"]})
                step += 1

            if val_scenes and (epoch % cfg.eval_interval == 0 or epoch == cfg.epochs - 1):
                report = evaluate(model, val_scenes, candidate_k=cfg.candidate_k)
                model.train()
                eval_log.write(
                    {
                        "epoch": epoch,
                        "step": step,
                        "ap50": report.ap50,
                        "ap75": report.ap75,
                        "ap": report.ap,
                        "cand_mean_iou": report.candidate_mean_iou,
                        "cand_median_iou": report.candidate_median_iou,
                    }
                )
                if epoch == cfg.epochs - 1:
                    final_eval = report
    finally:
        loss_log.close()
        train_log.close()
        eval_log.close()

    final_epoch_means = {
        key: float(np.mean([row[key] for row in final_epoch_rows]))
        for key in ("loss", "m11_cls", "m11_l1", "m11_giou", "m11_reg", "cls_o2m")
    }

    checkpoint_path: Path | None = None
    if run_path is not None:
        checkpoint_path = run_path / "checkpoint.pt"
        save_checkpoint(model, checkpoint_path)
        manifest = {
            "config": cfg.to_dict(),
            "artifacts": {
                "checkpoint": checkpoint_path.name,
                "losses_csv": "losses.csv",
                "train_log_csv": "train_log.csv",
                "eval_csv": "eval.csv",
            },
            "tool_version": __version__,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        with open(run_path / "manifest.json", "w") as handle:
            json.dump(manifest, handle, indent=2)

    model.eval()
    return TrainResult(
        run_dir=run_path,
        checkpoint_path=checkpoint_path,
        model=model,
        final_eval=final_eval,
        final_epoch_means=final_epoch_means,
        steps=step,
    )


def train_from_config(cfg: TrainConfig, run_dir: str | Path) -> TrainResult:
    """Load the archives referenced by the config and train."""
    if not cfg.train_data:
        raise ValueError("config has no train_data path")
    train_scenes = load_scenes(cfg.train_data)
    val_scenes = load_scenes(cfg.val_data) if cfg.val_data else None
    return train(cfg, train_scenes, val_scenes, run_dir)


def candidate_report(
    model: Detector, scenes: list[Scene], k: int = 20
):
    """Candidate-quality statistics plus the per-scene dump used for overlays."""
    predictions = predict_scenes(model, scenes)
    ground_truths = scene_ground_truths(scenes)
    quality = candidate_quality(predictions, ground_truths, k=k)
    for dump, scene in zip(quality.per_scene, scenes):
        dump["scene_id"] = scene.scene_id
    return quality
