"""Loss terms and the mixed supervision assembly.

The mixed objective per decoder layer and ground truth has three parts: a
one-to-one classification term on the matched query, plus classification
and box-regression terms over every one-to-many member. The one-to-one box
term is merged into the one-to-many box term (the one-to-one query is a
member of its ground truth's set via the union rule, so it is still
regressed). With the one-to-many side disabled (tau = 1 and a zero
one-to-many weight) the assembly reduces exactly to the plain one-to-one
objective.

Assignments come from detached predictions; gradients flow only through
the loss terms below.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .boxes import elementwise_giou
from .matching import (
    MatcherConfig,
    OneToManyAssignment,
    OneToOneMatch,
    hungarian,
    o2o_cost_matrix,
    one_to_many_match,
)
from .model import LayerPredictions, LayerSlice

NORMALIZATION_MODES = ("per_gt_count", "per_pair_count")
CSV_COLUMNS = ("step", "layer", "cls_o2o", "cls_o2m", "box_l1", "box_giou", "total")


@dataclass(frozen=True)
class LossConfig:
    """Weights and functional forms for the supervision terms."""

    w_cls_o2o: float = 2.0
    w_cls_o2m: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    focal_gamma: float = 2.0
    focal_balance: float = 0.25
    cls_loss_form: str = "focal"  # "focal" or "bce"
    o2o_normalization: str = "per_gt_count"
    o2m_normalization: str = "per_pair_count"

    def __post_init__(self) -> None:
        for name in ("w_cls_o2o", "w_cls_o2m", "w_l1", "w_giou"):
            value = getattr(self, name)
            if not (value >= 0 and value == value):
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0.0 <= self.focal_balance <= 1.0:
            raise ValueError("focal_balance must be in [0, 1]")
        if self.cls_loss_form not in ("focal", "bce"):
            raise ValueError(f"unknown cls_loss_form {self.cls_loss_form!r}")
        for name in ("o2o_normalization", "o2m_normalization"):
            if getattr(self, name) not in NORMALIZATION_MODES:
                raise ValueError(f"{name} must be one of {NORMALIZATION_MODES}")


@dataclass
class LayerLoss:
    """Unweighted loss terms of a single decoder layer."""

    cls_o2o: Tensor
    cls_o2m: Tensor
    box_l1: Tensor
    box_giou: Tensor

    def weighted_total(self, cfg: LossConfig) -> Tensor:
        return (
            cfg.w_cls_o2o * self.cls_o2o
            + cfg.w_cls_o2m * self.cls_o2m
            + cfg.w_l1 * self.box_l1
            + cfg.w_giou * self.box_giou
        )


@dataclass
class LossBreakdown:
    """Per-layer loss terms plus the weighted grand total."""

    per_layer: tuple[LayerLoss, ...]
    config: LossConfig

    @property
    def total(self) -> Tensor:
        total = self.per_layer[0].weighted_total(self.config)
        for layer in self.per_layer[1:]:
            total = total + layer.weighted_total(self.config)
        return total

    def to_rows(self, step: int) -> list[dict[str, object]]:
        """CSV rows (one per layer plus a 'total' row), columns CSV_COLUMNS.

        Values are the weighted contributions, so every row's total is the
        sum of its parts and a disabled term logs as exactly zero.
        """
        cfg = self.config
        rows: list[dict[str, object]] = []
        sums = {"cls_o2o": 0.0, "cls_o2m": 0.0, "box_l1": 0.0, "box_giou": 0.0}
        for index, layer in enumerate(self.per_layer):
            values = {
                "cls_o2o": cfg.w_cls_o2o * float(layer.cls_o2o.detach()),
                "cls_o2m": cfg.w_cls_o2m * float(layer.cls_o2m.detach()),
                "box_l1": cfg.w_l1 * float(layer.box_l1.detach()),
                "box_giou": cfg.w_giou * float(layer.box_giou.detach()),
            }
            for key, value in values.items():
                sums[key] += value
            rows.append(
                {
                    "step": step,
                    "layer": index,
                    **values,
                    "total": float(layer.weighted_total(cfg).detach()),
                }
            )
        rows.append({"step": step, "layer": "total", **sums, "total": float(self.total.detach())})
        return rows


def _normalizer(mode: str, num_gts: int, num_pairs: int) -> float:
    count = num_gts if mode == "per_gt_count" else num_pairs
    return float(max(count, 1))


def _cls_elementwise(logits: Tensor, targets: Tensor, cfg: LossConfig) -> Tensor:
    """Per-entry classification loss (focal or plain sigmoid cross-entropy)."""
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    if cfg.cls_loss_form == "bce":
        return ce
    prob = torch.sigmoid(logits)
    p_t = prob * targets + (1 - prob) * (1 - targets)
    modulator = (1 - p_t) ** cfg.focal_gamma
    balance = cfg.focal_balance * targets + (1 - cfg.focal_balance) * (1 - targets)
    return balance * modulator * ce


def cls_loss(
    logits: Tensor,
    positive_targets: Sequence[tuple[int, int]],
    normalizer: float,
    cfg: LossConfig,
) -> Tensor:
    """Classification loss over all (query, class) entries of one head.

    Listed (query_index, class_id) pairs are positives, everything else is
    negative. Each query may appear at most once; a duplicate means
    conflict resolution has not run and is rejected.
    """
    if normalizer <= 0:
        raise ValueError(f"normalizer must be positive, got {normalizer}")
    num_queries, num_classes = logits.shape
    seen: set[int] = set()
    targets = torch.zeros_like(logits)
    for query, class_id in positive_targets:
        if query in seen:
            raise ValueError(f"duplicate query {query} in positive targets")
        seen.add(query)
        if not 0 <= query < num_queries:
            raise ValueError(f"query index {query} out of range")
        if not 0 <= class_id < num_classes:
            raise ValueError(f"class id {class_id} out of range")
        targets[query, class_id] = 1.0
    return _cls_elementwise(logits, targets, cfg).sum() / normalizer


def box_loss(
    pred_boxes: Tensor,
    pairs: Sequence[tuple[int, int]],
    gt_boxes: Tensor,
    normalizer: float,
    cfg: LossConfig,
) -> tuple[Tensor, Tensor]:
    """(L1 sum, (1 - giou) sum) over assigned pairs, each divided by normalizer."""
    if normalizer <= 0:
        raise ValueError(f"normalizer must be positive, got {normalizer}")
    if not pairs:
        zero = pred_boxes.new_zeros(())
        return zero, zero.clone()
    query_idx = torch.as_tensor([q for q, _ in pairs], dtype=torch.long)
    gt_idx = torch.as_tensor([n for _, n in pairs], dtype=torch.long)
    pred = pred_boxes[query_idx]
    gt = gt_boxes[gt_idx]
    l1 = (pred - gt).abs().sum() / normalizer
    giou_term = (1 - elementwise_giou(pred, gt)).sum() / normalizer
    return l1, giou_term


def mixed_layer_loss(
    layer: LayerSlice,
    gt_classes: Tensor,
    gt_boxes: Tensor,
    o2o: OneToOneMatch,
    o2m: OneToManyAssignment,
    cfg: LossConfig,
    merged_box: bool = True,
) -> LayerLoss:
    """Mixed loss of one decoder layer.

    One-to-one classification on the layer-output head, one-to-many
    classification on the tap-point head, and box regression over all
    one-to-many members (which subsume the one-to-one pairs through the
    union rule).

    ``merged_box`` says the one-to-many box predictions are literally the
    one-to-one ones (shared box head reading the layer output), so the
    merged term alone covers the one-to-one pair and the loss has exactly
    three parts. When the one-to-many box path is distinct (internal tap or
    separate head), the one-to-one box term must stay, or the inference box
    head would receive no training signal at all.
    """
    num_gts = int(gt_classes.shape[0])
    o2m_pairs = o2m.as_pairs()
    o2o_norm = _normalizer(cfg.o2o_normalization, num_gts, num_gts)
    o2m_norm = _normalizer(cfg.o2m_normalization, num_gts, len(o2m_pairs))

    cls_o2o = cls_loss(
        layer.o2o_logits,
        [(q, int(gt_classes[n])) for q, n in o2o.pairs],
        o2o_norm,
        cfg,
    )
    cls_o2m = cls_loss(
        layer.o2m_logits,
        [(q, int(gt_classes[n])) for q, n in o2m_pairs],
        o2m_norm,
        cfg,
    )
    box_l1, box_giou = box_loss(layer.o2m_boxes, o2m_pairs, gt_boxes, o2m_norm, cfg)
    if not merged_box:
        o2o_l1, o2o_giou = box_loss(layer.o2o_boxes, list(o2o.pairs), gt_boxes, o2o_norm, cfg)
        box_l1 = box_l1 + o2o_l1
        box_giou = box_giou + o2o_giou
    return LayerLoss(cls_o2o=cls_o2o, cls_o2m=cls_o2m, box_l1=box_l1, box_giou=box_giou)


def one_to_one_layer_loss(
    layer: LayerSlice,
    gt_classes: Tensor,
    gt_boxes: Tensor,
    o2o: OneToOneMatch,
    cfg: LossConfig,
) -> LayerLoss:
    """Plain one-to-one loss of one decoder layer (classification + box)."""
    num_gts = int(gt_classes.shape[0])
    norm = _normalizer(cfg.o2o_normalization, num_gts, num_gts)
    cls_o2o = cls_loss(
        layer.o2o_logits,
        [(q, int(gt_classes[n])) for q, n in o2o.pairs],
        norm,
        cfg,
    )
    box_l1, box_giou = box_loss(layer.o2o_boxes, list(o2o.pairs), gt_boxes, norm, cfg)
    zero = cls_o2o.new_zeros(())
    return LayerLoss(cls_o2o=cls_o2o, cls_o2m=zero, box_l1=box_l1, box_giou=box_giou)


def match_layer(
    layer: LayerSlice,
    gt_classes: Tensor,
    gt_boxes: Tensor,
    matcher_cfg: MatcherConfig,
    need_o2m: bool,
) -> tuple[OneToOneMatch, OneToManyAssignment | None]:
    """Recompute both assignments for one layer from detached predictions."""
    with torch.no_grad():
        o2o_probs = torch.sigmoid(layer.o2o_logits.detach())
        cost = o2o_cost_matrix(
            o2o_probs, layer.o2o_boxes.detach(), gt_classes, gt_boxes, matcher_cfg
        )
        o2o = hungarian(cost)
        if not need_o2m:
            return o2o, None
        o2m_probs = torch.sigmoid(layer.o2m_logits.detach())
        o2m = one_to_many_match(
            o2m_probs, layer.o2m_boxes.detach(), gt_classes, gt_boxes, o2o, matcher_cfg
        )
    return o2o, o2m


def total_loss(
    predictions: LayerPredictions,
    gt_classes: Tensor,
    gt_boxes: Tensor,
    cfg: LossConfig,
    matcher_cfg: MatcherConfig,
    supervision: str = "mixed",
    merged_box: bool = True,
) -> LossBreakdown:
    """Deep-supervised loss of one scene: every layer is matched and scored.

    ``predictions`` must be scene level (layer-major tensors without a batch
    dimension). ``supervision`` selects the mixed assembly or the plain
    one-to-one baseline; ``merged_box`` is forwarded to mixed_layer_loss.
    """
    if supervision not in ("mixed", "one_to_one"):
        raise ValueError(f"unknown supervision mode {supervision!r}")
    layers = []
    for index in range(predictions.num_layers):
        layer = predictions.layer_slice(index)
        o2o, o2m = match_layer(
            layer, gt_classes, gt_boxes, matcher_cfg, need_o2m=supervision == "mixed"
        )
        if supervision == "mixed":
            assert o2m is not None
            layers.append(
                mixed_layer_loss(layer, gt_classes, gt_boxes, o2o, o2m, cfg, merged_box)
            )
        else:
            layers.append(one_to_one_layer_loss(layer, gt_classes, gt_boxes, o2o, cfg))
    return LossBreakdown(per_layer=tuple(layers), config=cfg)


def scene_losses(
    predictions: LayerPredictions,
    gt_classes: Tensor,
    gt_boxes: Tensor,
    cfg: LossConfig,
    matcher_cfg: MatcherConfig,
    supervision: str = "mixed",
    merged_box: bool = True,
) -> tuple[LossBreakdown, dict[str, float]]:
    """Training loss plus the one-to-one measurement, matching each layer once.

    The measurement is the plain one-to-one loss on the one-to-one head and
    its optimal matching, taken identically in every training mode, so
    baseline and mixed runs log the same quantity.
    """
    if supervision not in ("mixed", "one_to_one"):
        raise ValueError(f"unknown supervision mode {supervision!r}")
    layers = []
    cls = l1 = giou_term = 0.0
    for index in range(predictions.num_layers):
        layer = predictions.layer_slice(index)
        o2o, o2m = match_layer(
            layer, gt_classes, gt_boxes, matcher_cfg, need_o2m=supervision == "mixed"
        )
        if supervision == "mixed":
            assert o2m is not None
            layers.append(
                mixed_layer_loss(layer, gt_classes, gt_boxes, o2o, o2m, cfg, merged_box)
            )
            with torch.no_grad():
                detached = LayerSlice(*(t.detach() for t in layer))
                measured = one_to_one_layer_loss(detached, gt_classes, gt_boxes, o2o, cfg)
        else:
            measured = one_to_one_layer_loss(layer, gt_classes, gt_boxes, o2o, cfg)
            layers.append(measured)
        cls += float(measured.cls_o2o.detach())
        l1 += float(measured.box_l1.detach())
        giou_term += float(measured.box_giou.detach())
    measurement = {
        "cls": cfg.w_cls_o2o * cls,
        "l1": l1,
        "giou": giou_term,
        "reg": cfg.w_l1 * l1 + cfg.w_giou * giou_term,
    }
    return LossBreakdown(per_layer=tuple(layers), config=cfg), measurement


def measure_one_to_one(
    predictions: LayerPredictions,
    gt_classes: Tensor,
    gt_boxes: Tensor,
    cfg: LossConfig,
    matcher_cfg: MatcherConfig,
) -> dict[str, float]:
    """One-to-one loss components on the one-to-one head, summed over layers."""
    with torch.no_grad():
        _, measurement = scene_losses(
            predictions, gt_classes, gt_boxes, cfg, matcher_cfg, supervision="one_to_one"
        )
    return measurement


def batched_losses(
    predictions: LayerPredictions,
    targets: Sequence[tuple[Tensor, Tensor]],
    cfg: LossConfig,
    matcher_cfg: MatcherConfig,
    supervision: str = "mixed",
    merged_box: bool = True,
) -> tuple[LossBreakdown, dict[str, float]]:
    """Batch-mean loss breakdown plus the batch-mean one-to-one measurement.

    Numerically the average of per-scene scene_losses over the batch (up to
    float summation order), assembled with one tensor pass per decoder layer
    so small-tensor dispatch does not dominate CPU training. Matching still
    runs per scene, per layer, on detached predictions.
    """
    if supervision not in ("mixed", "one_to_one"):
        raise ValueError(f"unknown supervision mode {supervision!r}")
    batch = predictions.batch_size
    if batch != len(targets):
        raise ValueError(f"{len(targets)} target sets for a batch of {batch}")
    mixed = supervision == "mixed"

    layer_losses: list[LayerLoss] = []
    measured_cls = measured_l1 = measured_giou = 0.0
    o2m_members = 0
    total_gts = 0
    for index in range(predictions.num_layers):
        o2o_logits = predictions.o2o_logits[index]
        o2o_boxes = predictions.o2o_boxes[index]
        o2m_logits = predictions.o2m_logits[index]
        o2m_boxes = predictions.o2m_boxes[index]
        with torch.no_grad():
            o2o_probs = torch.sigmoid(o2o_logits)
            o2m_probs = torch.sigmoid(o2m_logits) if mixed else None

        o2o_targets = torch.zeros_like(o2o_logits)
        o2o_scale = o2o_logits.new_zeros(batch)
        o2m_targets = torch.zeros_like(o2m_logits) if mixed else None
        o2m_scale = o2m_logits.new_zeros(batch) if mixed else None
        o2o_pair_scene: list[int] = []
        o2o_pair_query: list[int] = []
        o2o_pair_weight: list[float] = []
        o2o_pair_gt: list[Tensor] = []
        o2m_pair_scene: list[int] = []
        o2m_pair_query: list[int] = []
        o2m_pair_weight: list[float] = []
        o2m_pair_gt: list[Tensor] = []

        for scene in range(batch):
            gt_classes, gt_boxes = targets[scene]
            num_gts = int(gt_classes.shape[0])
            o2o_norm = _normalizer(cfg.o2o_normalization, num_gts, num_gts)
            o2o_scale[scene] = 1.0 / (o2o_norm * batch)
            with torch.no_grad():
                cost = o2o_cost_matrix(
                    o2o_probs[scene], o2o_boxes[scene].detach(), gt_classes, gt_boxes, matcher_cfg
                )
                o2o = hungarian(cost)
                o2m = None
                if mixed:
                    o2m = one_to_many_match(
                        o2m_probs[scene], o2m_boxes[scene].detach(),
                        gt_classes, gt_boxes, o2o, matcher_cfg,
                    )
            o2o_weight = float(o2o_scale[scene])
            for q, n in o2o.pairs:
                o2o_targets[scene, q, int(gt_classes[n])] = 1.0
                o2o_pair_scene.append(scene)
                o2o_pair_query.append(q)
                o2o_pair_weight.append(o2o_weight)
                o2o_pair_gt.append(gt_boxes[n])
            if mixed:
                assert o2m is not None and o2m_targets is not None and o2m_scale is not None
                o2m_pairs = o2m.as_pairs()
                o2m_members += len(o2m_pairs)
                total_gts += num_gts
                o2m_norm = _normalizer(cfg.o2m_normalization, num_gts, len(o2m_pairs))
                o2m_scale[scene] = 1.0 / (o2m_norm * batch)
                weight = float(o2m_scale[scene])
                for q, n in o2m_pairs:
                    o2m_targets[scene, q, int(gt_classes[n])] = 1.0
                    o2m_pair_scene.append(scene)
                    o2m_pair_query.append(q)
                    o2m_pair_weight.append(weight)
                    o2m_pair_gt.append(gt_boxes[n])

        def weighted_box_terms(boxes: Tensor, scenes, queries, weights, gts):
            if not scenes:
                zero = boxes.new_zeros(())
                return zero, zero.clone()
            pred = boxes[scenes, queries]
            gt = torch.stack(gts).to(boxes.dtype)
            weight = boxes.new_tensor(weights)
            l1 = ((pred - gt).abs().sum(-1) * weight).sum()
            giou_term = ((1 - elementwise_giou(pred, gt)) * weight).sum()
            return l1, giou_term

        cls_o2o = (_cls_elementwise(o2o_logits, o2o_targets, cfg) * o2o_scale[:, None, None]).sum()
        if mixed:
            assert o2m_targets is not None and o2m_scale is not None
            cls_o2m = (_cls_elementwise(o2m_logits, o2m_targets, cfg) * o2m_scale[:, None, None]).sum()
            box_l1, box_giou = weighted_box_terms(
                o2m_boxes, o2m_pair_scene, o2m_pair_query, o2m_pair_weight, o2m_pair_gt
            )
            if not merged_box:
                extra_l1, extra_giou = weighted_box_terms(
                    o2o_boxes, o2o_pair_scene, o2o_pair_query, o2o_pair_weight, o2o_pair_gt
                )
                box_l1 = box_l1 + extra_l1
                box_giou = box_giou + extra_giou
        else:
            cls_o2m = cls_o2o.new_zeros(())
            box_l1, box_giou = weighted_box_terms(
                o2o_boxes, o2o_pair_scene, o2o_pair_query, o2o_pair_weight, o2o_pair_gt
            )
        layer_losses.append(
            LayerLoss(cls_o2o=cls_o2o, cls_o2m=cls_o2m, box_l1=box_l1, box_giou=box_giou)
        )

        # one-to-one measurement on the one-to-one head, identical in every mode
        with torch.no_grad():
            if mixed:
                m_cls = (
                    _cls_elementwise(o2o_logits.detach(), o2o_targets, cfg)
                    * o2o_scale[:, None, None]
                ).sum()
                m_l1, m_giou = weighted_box_terms(
                    o2o_boxes.detach(), o2o_pair_scene, o2o_pair_query, o2o_pair_weight, o2o_pair_gt
                )
            else:
                m_cls, m_l1, m_giou = cls_o2o, box_l1, box_giou
            measured_cls += float(m_cls)
            measured_l1 += float(m_l1)
            measured_giou += float(m_giou)

    measurement = {
        "cls": cfg.w_cls_o2o * measured_cls,
        "l1": measured_l1,
        "giou": measured_giou,
        "reg": cfg.w_l1 * measured_l1 + cfg.w_giou * measured_giou,
        "o2m_per_gt": o2m_members / total_gts if total_gts else 0.0,
    }
    return LossBreakdown(per_layer=tuple(layer_losses), config=cfg), measurement
