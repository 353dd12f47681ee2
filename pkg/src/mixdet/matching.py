"""Query-to-ground-truth assignment.

Two assignment rules live here:

* the one-to-one matcher: a weighted classification/L1/GIoU cost matrix
  solved as a linear sum assignment, with a deterministic lexicographic
  tie-break so repeated runs and hand-written tests are exact;
* the one-to-many matcher: per ground truth, rank queries by a match score
  (``alpha * class_score + (1 - alpha) * IoU``), keep the top K above a
  threshold, union in the one-to-one query, and resolve cross-ground-truth
  conflicts so every query supervises at most one object.

Both operate on detached predictions; gradients never flow through the
assignment itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .boxes import Box, boxes_to_tensor, pairwise_giou, pairwise_iou


@dataclass(frozen=True)
class MatcherConfig:
    """Knobs for both assignment rules.

    alpha, top_k, tau drive the one-to-many rule; the cost_* weights drive
    the one-to-one cost matrix. ``focal_cost`` switches the classification
    cost from the plain negative score to the focal-style cost.
    """

    alpha: float = 0.4
    top_k: int = 6
    tau: float = 0.4
    include_o2o: bool = True
    cost_class: float = 2.0
    cost_bbox: float = 5.0
    cost_giou: float = 2.0
    focal_cost: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        for name in ("cost_class", "cost_bbox", "cost_giou"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class OneToOneMatch:
    """Optimal injection of ground truths into queries.

    ``pairs`` holds one (query_index, gt_index) tuple per ground truth,
    ordered by gt_index.
    """

    pairs: tuple[tuple[int, int], ...]

    @property
    def num_gts(self) -> int:
        return len(self.pairs)

    @property
    def query_indices(self) -> tuple[int, ...]:
        return tuple(q for q, _ in self.pairs)

    def query_for(self, gt_index: int) -> int:
        return self.pairs[gt_index][0]


@dataclass(frozen=True)
class OneToManyAssignment:
    """Per ground truth: the (query_index, match_score) members supervising it.

    Each member tuple is sorted by descending score (ties by lower query
    index). After conflict resolution a query appears in at most one set.
    """

    per_gt: tuple[tuple[tuple[int, float], ...], ...]

    @property
    def num_gts(self) -> int:
        return len(self.per_gt)

    def as_pairs(self) -> list[tuple[int, int]]:
        """Flatten to (query_index, gt_index) pairs, gt-major order."""
        return [(q, n) for n, members in enumerate(self.per_gt) for q, _ in members]

    def to_json_dict(self) -> dict[str, list[list[float]]]:
        return {
            str(n): [[int(q), float(s)] for q, s in members]
            for n, members in enumerate(self.per_gt)
        }


def o2o_cost_matrix(
    scores: Tensor,
    boxes: Tensor,
    gt_classes: Sequence[int] | Tensor,
    gt_boxes: Tensor,
    cfg: MatcherConfig,
) -> Tensor:
    """Weighted one-to-one matching cost, shape (num_queries, num_gts).

    ``scores`` are per-class probabilities (post-activation) of shape (Q, C);
    ``boxes`` and ``gt_boxes`` are center-form. Entry (q, n) is
    ``cost_class * cls_cost + cost_bbox * L1 + cost_giou * (-giou)``.
    """
    gt_classes = torch.as_tensor(gt_classes, dtype=torch.long)
    num_queries = scores.shape[0]
    num_gts = gt_classes.shape[0]
    if num_queries < num_gts:
        raise ValueError(
            f"more ground truths than queries: {num_gts} > {num_queries}"
        )
    if num_gts == 0:
        return torch.zeros((num_queries, 0), dtype=scores.dtype)
    if int(gt_classes.min()) < 0 or int(gt_classes.max()) >= scores.shape[1]:
        raise ValueError("gt class id out of range")

    gt_probs = scores[:, gt_classes]
    if cfg.focal_cost:
        # Deformable-DETR flavor: difference of focal positive/negative costs.
        alpha, gamma = 0.25, 2.0
        p = gt_probs.clamp(1e-8, 1 - 1e-8)
        pos = alpha * ((1 - p) ** gamma) * (-torch.log(p))
        neg = (1 - alpha) * (p**gamma) * (-torch.log(1 - p))
        cls_cost = pos - neg
    else:
        cls_cost = -gt_probs
    l1_cost = torch.cdist(boxes, gt_boxes, p=1)
    giou_cost = -pairwise_giou(boxes, gt_boxes)
    return cfg.cost_class * cls_cost + cfg.cost_bbox * l1_cost + cfg.cost_giou * giou_cost


def assignment_cost(cost: Tensor | np.ndarray, match: OneToOneMatch) -> float:
    """Total cost of a match, accumulated in ascending gt order."""
    c = np.asarray(cost, dtype=np.float64)
    total = 0.0
    for q, n in match.pairs:
        total += float(c[q, n])
    return total


def _sequence_total(cost: np.ndarray, q_for_gt: np.ndarray) -> float:
    total = 0.0
    for n in range(len(q_for_gt)):
        total += float(cost[q_for_gt[n], n])
    return total


def _lex_smallest_optimum(cost: np.ndarray, q_for_gt: np.ndarray, best_total: float) -> np.ndarray:
    """Refine an optimal assignment to the lexicographically smallest one.

    Among all assignments with the same (float-evaluated) total, returns the
    one whose (gt 0, gt 1, ...) query sequence is smallest. Works by fixing
    ground truths in order and testing cheaper query choices; a column-min
    lower bound prunes candidates that cannot reach the optimum, so the
    common unique-optimum case costs no extra assignment solves.
    """
    num_queries, num_gts = cost.shape
    col_min = cost.min(axis=0)
    # tail_bound[n] = sum of col_min over gts >= n
    tail_bound = np.zeros(num_gts + 1)
    for n in range(num_gts - 1, -1, -1):
        tail_bound[n] = tail_bound[n + 1] + col_min[n]
    slack = 1e-9 * (1.0 + abs(best_total))

    current = q_for_gt.copy()
    used = np.zeros(num_queries, dtype=bool)
    prefix_total = 0.0
    for n in range(num_gts):
        incumbent = int(current[n])
        for q in range(incumbent):
            if used[q]:
                continue
            bound = prefix_total + float(cost[q, n]) + float(tail_bound[n + 1])
            if bound > best_total + slack:
                continue
            candidate = _complete_assignment(cost, current, used, n, q)
            if candidate is not None and _sequence_total(cost, candidate) == best_total:
                current = candidate
                incumbent = q
                break
        used[incumbent] = True
        prefix_total += float(cost[incumbent, n])
    return current


def _complete_assignment(
    cost: np.ndarray,
    current: np.ndarray,
    used: np.ndarray,
    gt_index: int,
    query: int,
) -> np.ndarray | None:
    """Optimal completion after fixing gt_index -> query on top of the prefix."""
    num_queries, num_gts = cost.shape
    free = np.flatnonzero(~used)
    free = free[free != query]
    rest = np.arange(gt_index + 1, num_gts)
    candidate = current.copy()
    candidate[gt_index] = query
    if rest.size:
        if free.size < rest.size:
            return None
        sub = cost[np.ix_(free, rest)]
        rows, cols = linear_sum_assignment(sub)
        candidate[rest[cols]] = free[rows]
    return candidate


def hungarian(cost: Tensor | np.ndarray) -> OneToOneMatch:
    """Cost-minimizing assignment of ground truths (columns) to queries (rows).

    Requires at least as many queries as ground truths and finite entries.
    Ties between optimal assignments break toward the lexicographically
    smallest (gt_index, query_index) sequence.
    """
    c = np.asarray(cost, dtype=np.float64) if not torch.is_tensor(cost) else cost.detach().cpu().numpy().astype(np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be 2-d, got shape {c.shape}")
    num_queries, num_gts = c.shape
    if num_queries < num_gts:
        raise ValueError(f"more ground truths than queries: {num_gts} > {num_queries}")
    if num_gts == 0:
        return OneToOneMatch(pairs=())
    if not np.isfinite(c).all():
        raise ValueError("cost matrix contains non-finite entries")

    rows, cols = linear_sum_assignment(c)
    q_for_gt = np.empty(num_gts, dtype=np.int64)
    q_for_gt[cols] = rows
    best_total = _sequence_total(c, q_for_gt)
    q_for_gt = _lex_smallest_optimum(c, q_for_gt, best_total)
    return OneToOneMatch(pairs=tuple((int(q_for_gt[n]), n) for n in range(num_gts)))


def match_score(
    class_scores: Tensor | Sequence[float],
    box,
    gt_class: int,
    gt_box,
    alpha: float,
) -> float:
    """alpha * score[gt_class] + (1 - alpha) * IoU(box, gt_box)."""
    scores = torch.as_tensor(class_scores, dtype=torch.float64)
    if not 0 <= gt_class < scores.shape[-1]:
        raise ValueError(f"gt_class {gt_class} out of range for {scores.shape[-1]} classes")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    box_t = boxes_to_tensor([box]) if isinstance(box, Box) else torch.as_tensor(box, dtype=torch.float64).reshape(1, 4)
    gt_t = boxes_to_tensor([gt_box]) if isinstance(gt_box, Box) else torch.as_tensor(gt_box, dtype=torch.float64).reshape(1, 4)
    overlap = float(pairwise_iou(box_t, gt_t)[0, 0])
    return alpha * float(scores[gt_class]) + (1.0 - alpha) * overlap


def match_score_matrix(
    scores: Tensor,
    boxes: Tensor,
    gt_classes: Sequence[int] | Tensor,
    gt_boxes: Tensor,
    alpha: float,
) -> np.ndarray:
    """Match scores for every (query, gt) pair, shape (Q, N)."""
    gt_classes = torch.as_tensor(gt_classes, dtype=torch.long)
    overlaps = pairwise_iou(boxes, gt_boxes)
    out = alpha * scores[:, gt_classes] + (1.0 - alpha) * overlaps
    return out.detach().cpu().numpy().astype(np.float64)


def one_to_many_match(
    scores: Tensor,
    boxes: Tensor,
    gt_classes: Sequence[int] | Tensor,
    gt_boxes: Tensor,
    o2o: OneToOneMatch,
    cfg: MatcherConfig,
) -> OneToManyAssignment:
    """Top-K / threshold assignment of queries to every ground truth.

    Per ground truth: rank all queries by match score (descending, ties to
    the lower query index), keep the top ``cfg.top_k``, drop members whose
    score is below ``cfg.tau``, then union in the one-to-one query (exempt
    from the threshold) when ``cfg.include_o2o``. A query landing in several
    sets is kept only where its score is highest (ties to the lower gt
    index), except one-to-one members, which always stay with their own
    ground truth.
    """
    gt_classes = torch.as_tensor(gt_classes, dtype=torch.long)
    num_gts = int(gt_classes.shape[0])
    if o2o.num_gts != num_gts:
        raise ValueError(f"one-to-one match covers {o2o.num_gts} gts, expected {num_gts}")
    if num_gts == 0:
        return OneToManyAssignment(per_gt=())

    score_mat = match_score_matrix(scores, boxes, gt_classes, gt_boxes, cfg.alpha)
    o2o_query = {n: q for q, n in o2o.pairs}

    members: list[dict[int, float]] = []
    for n in range(num_gts):
        col = score_mat[:, n]
        order = np.argsort(-col, kind="stable")
        chosen = {int(q): float(col[q]) for q in order[: cfg.top_k] if col[q] >= cfg.tau}
        if cfg.include_o2o:
            q = o2o_query[n]
            chosen[q] = float(col[q])
        members.append(chosen)

    # Cross-gt conflict resolution.
    owner: dict[int, int] = {}
    for n in range(num_gts):
        for q, s in members[n].items():
            if cfg.include_o2o and o2o_query[n] == q:
                owner[q] = n  # one-to-one members are never reassigned
            elif q not in owner:
                owner[q] = n
            else:
                cur = owner[q]
                if cfg.include_o2o and o2o_query[cur] == q:
                    continue
                if s > members[cur][q]:
                    owner[q] = n

    per_gt = []
    for n in range(num_gts):
        kept = [(q, s) for q, s in members[n].items() if owner[q] == n]
        kept.sort(key=lambda qs: (-qs[1], qs[0]))
        per_gt.append(tuple(kept))
    return OneToManyAssignment(per_gt=tuple(per_gt))
