"""Average-precision evaluation and candidate-quality statistics.

The AP protocol is the standard one: predictions are ranked by score per
class, greedily matched to the highest-IoU unmatched ground truth at each
IoU threshold, and the area under the precision envelope is integrated at
every recall change point. Classes without any ground truth are excluded
from the means. Ranking ties break deterministically by (scene index,
query index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .boxes import pairwise_iou

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 1.0, 0.05), 2))


@dataclass
class ScenePredictions:
    """Final-layer candidates of one scene: (Q, C) scores and (Q, 4) boxes."""

    scores: np.ndarray
    boxes: np.ndarray


@dataclass
class SceneGroundTruth:
    classes: np.ndarray  # (N,) int
    boxes: np.ndarray  # (N, 4) center form


@dataclass
class EvalReport:
    ap50: float
    ap75: float
    ap: float  # mean over IoU 0.50:0.95:0.05
    per_class: dict[int, dict[str, float]]
    candidate_mean_iou: float
    candidate_median_iou: float
    candidate_k: int
    num_scenes: int
    num_gts: int

    def to_json_dict(self) -> dict:
        return {
            "ap50": self.ap50,
            "ap75": self.ap75,
            "ap": self.ap,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "candidate_mean_iou": self.candidate_mean_iou,
            "candidate_median_iou": self.candidate_median_iou,
            "candidate_k": self.candidate_k,
            "num_scenes": self.num_scenes,
            "num_gts": self.num_gts,
        }


def _pairwise_iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    return pairwise_iou(
        torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    ).numpy()


def _envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope at every recall change point."""
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    previous = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - previous) * envelope))


def class_average_precision(
    predictions: list[ScenePredictions],
    ground_truths: list[SceneGroundTruth],
    class_id: int,
    iou_threshold: float,
) -> float | None:
    """AP of one class at one threshold; None when the class has no ground truth."""
    num_pos = sum(int((gt.classes == class_id).sum()) for gt in ground_truths)
    if num_pos == 0:
        return None

    scores, scene_ids, query_ids = [], [], []
    per_scene_iou = []
    for scene_index, (pred, gt) in enumerate(zip(predictions, ground_truths)):
        keep = np.flatnonzero(gt.classes == class_id)
        per_scene_iou.append(_pairwise_iou_np(pred.boxes, gt.boxes[keep]))
        scores.append(pred.scores[:, class_id])
        scene_ids.append(np.full(pred.scores.shape[0], scene_index))
        query_ids.append(np.arange(pred.scores.shape[0]))
    flat_scores = np.concatenate(scores)
    flat_scenes = np.concatenate(scene_ids)
    flat_queries = np.concatenate(query_ids)
    order = np.lexsort((flat_queries, flat_scenes, -flat_scores))

    matched = [np.zeros(m.shape[1], dtype=bool) for m in per_scene_iou]
    tp = np.zeros(order.size)
    fp = np.zeros(order.size)
    for rank, flat_index in enumerate(order):
        scene_index = int(flat_scenes[flat_index])
        query = int(flat_queries[flat_index])
        ious = per_scene_iou[scene_index][query]
        best_gt, best_iou = -1, iou_threshold
        for gt_index in range(ious.shape[0]):
            if matched[scene_index][gt_index]:
                continue
            if ious[gt_index] >= best_iou and (best_gt < 0 or ious[gt_index] > best_iou):
                best_gt, best_iou = gt_index, ious[gt_index]
        if best_gt >= 0:
            matched[scene_index][best_gt] = True
            tp[rank] = 1
        else:
            fp[rank] = 1

    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / num_pos
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    return _envelope_area(recall, precision)


def average_precision_sweep(
    predictions: list[ScenePredictions],
    ground_truths: list[SceneGroundTruth],
    num_classes: int,
    thresholds: tuple[float, ...] = IOU_THRESHOLDS,
) -> dict[int, dict[float, float]]:
    """AP per class per threshold; classes without ground truth are omitted."""
    out: dict[int, dict[float, float]] = {}
    for class_id in range(num_classes):
        per_threshold = {}
        for threshold in thresholds:
            ap = class_average_precision(predictions, ground_truths, class_id, threshold)
            if ap is None:
                per_threshold = None
                break
            per_threshold[threshold] = ap
        if per_threshold is not None:
            out[class_id] = per_threshold
    return out


@dataclass
class CandidateQuality:
    """Top-k candidate IoU per ground truth, aggregated and per scene."""

    mean_iou: float
    median_iou: float
    k: int
    per_gt: list[float] = field(repr=False)
    per_scene: list[dict] = field(repr=False)


def candidate_quality(
    predictions: list[ScenePredictions],
    ground_truths: list[SceneGroundTruth],
    k: int = 20,
) -> CandidateQuality:
    """Mean IoU of each ground truth's k best-overlapping candidates."""
    if k < 1:
        raise ValueError("k must be >= 1")
    per_gt: list[float] = []
    per_scene: list[dict] = []
    for scene_index, (pred, gt) in enumerate(zip(predictions, ground_truths)):
        if k > pred.boxes.shape[0]:
            raise ValueError(f"k={k} exceeds the {pred.boxes.shape[0]} candidates per scene")
        ious = _pairwise_iou_np(pred.boxes, gt.boxes)
        scene_dump = {"scene_index": scene_index, "gts": []}
        for gt_index in range(gt.boxes.shape[0]):
            column = ious[:, gt_index]
            top = np.argsort(-column, kind="stable")[:k]
            per_gt.append(float(column[top].mean()))
            scene_dump["gts"].append(
                {
                    "gt_index": gt_index,
                    "class": int(gt.classes[gt_index]),
                    "box": [float(v) for v in gt.boxes[gt_index]],
                    "candidates": [
                        {"query": int(q), "box": [float(v) for v in pred.boxes[q]], "iou": float(column[q])}
                        for q in top
                    ],
                }
            )
        per_scene.append(scene_dump)
    if per_gt:
        mean_iou = float(np.mean(per_gt))
        median_iou = float(np.median(per_gt))
    else:
        mean_iou = median_iou = float("nan")
    return CandidateQuality(
        mean_iou=mean_iou, median_iou=median_iou, k=k, per_gt=per_gt, per_scene=per_scene
    )


def evaluate_predictions(
    predictions: list[ScenePredictions],
    ground_truths: list[SceneGroundTruth],
    num_classes: int,
    candidate_k: int = 20,
) -> EvalReport:
    """Full report: AP at 0.5 / 0.75 / mean over thresholds plus candidate quality."""
    if not predictions:
        raise ValueError("cannot evaluate an empty dataset")
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths must align")
    sweep = average_precision_sweep(predictions, ground_truths, num_classes)

    def mean_over_classes(pick) -> float:
        values = [pick(per_threshold) for per_threshold in sweep.values()]
        return float(np.mean(values)) if values else float("nan")

    per_class = {
        class_id: {
            "ap50": per_threshold[0.5],
            "ap75": per_threshold[0.75],
            "ap": float(np.mean(list(per_threshold.values()))),
        }
        for class_id, per_threshold in sweep.items()
    }
    quality = candidate_quality(predictions, ground_truths, k=candidate_k)
    return EvalReport(
        ap50=mean_over_classes(lambda t: t[0.5]),
        ap75=mean_over_classes(lambda t: t[0.75]),
        ap=mean_over_classes(lambda t: float(np.mean(list(t.values())))),
        per_class=per_class,
        candidate_mean_iou=quality.mean_iou,
        candidate_median_iou=quality.median_iou,
        candidate_k=candidate_k,
        num_scenes=len(predictions),
        num_gts=sum(len(gt.classes) for gt in ground_truths),
    )
