import numpy as np
import pytest
import torch

from mixdet.boxes import Box
from mixdet.matching import (
    MatcherConfig,
    OneToOneMatch,
    assignment_cost,
    hungarian,
    match_score,
    match_score_matrix,
    o2o_cost_matrix,
    one_to_many_match,
)

from .conftest import random_boxes
from .oracles import brute_force_assignment, shifted_box_with_iou


def random_instance(rng, num_queries, num_gts, num_classes=3):
    scores = torch.from_numpy(rng.uniform(0, 1, size=(num_queries, num_classes)))
    boxes = random_boxes(rng, num_queries)
    gt_classes = torch.from_numpy(rng.integers(0, num_classes, size=num_gts))
    gt_boxes = random_boxes(rng, num_gts)
    return scores, boxes, gt_classes, gt_boxes


class TestMatcherConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"alpha": -0.1},
            {"alpha": 1.2},
            {"tau": 2.0},
            {"top_k": 0},
            {"cost_bbox": -1.0},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            MatcherConfig(**kwargs)


class TestCostMatrix:
    def test_pure_class_term(self):
        cfg = MatcherConfig(cost_class=1.0, cost_bbox=0.0, cost_giou=0.0)
        scores = torch.tensor([[1.0, 0.0]])
        boxes = torch.tensor([[0.5, 0.5, 0.2, 0.2]])
        cost = o2o_cost_matrix(scores, boxes, [0], boxes.clone(), cfg)
        assert float(cost[0, 0]) == -1.0

    def test_identical_boxes(self):
        cfg = MatcherConfig(cost_class=0.0, cost_bbox=5.0, cost_giou=2.0)
        scores = torch.tensor([[0.3, 0.3]])
        boxes = torch.tensor([[0.5, 0.5, 0.2, 0.2]])
        cost = o2o_cost_matrix(scores, boxes, [1], boxes.clone(), cfg)
        assert float(cost[0, 0]) == pytest.approx(-2.0, abs=1e-7)

    def test_matches_scalar_recomputation(self, rng):
        from .oracles import closed_form_giou

        cfg = MatcherConfig(cost_class=2.0, cost_bbox=5.0, cost_giou=2.0)
        scores, boxes, gt_classes, gt_boxes = random_instance(rng, 6, 4)
        cost = o2o_cost_matrix(scores, boxes, gt_classes, gt_boxes, cfg)
        for q in range(6):
            for n in range(4):
                cls_term = -float(scores[q, gt_classes[n]])
                l1 = sum(abs(float(boxes[q, k]) - float(gt_boxes[n, k])) for k in range(4))
                g = closed_form_giou(Box(*boxes[q].tolist()).corners, Box(*gt_boxes[n].tolist()).corners)
                expected = 2.0 * cls_term + 5.0 * l1 + 2.0 * (-g)
                assert float(cost[q, n]) == pytest.approx(expected, abs=1e-6)

    def test_more_gts_than_queries(self, rng):
        scores, boxes, _, _ = random_instance(rng, 2, 2)
        gt_boxes = random_boxes(rng, 3)
        with pytest.raises(ValueError, match="more ground truths than queries"):
            o2o_cost_matrix(scores, boxes, [0, 1, 2], gt_boxes, MatcherConfig())

    def test_gt_class_out_of_range(self, rng):
        scores, boxes, _, gt_boxes = random_instance(rng, 4, 1)
        with pytest.raises(ValueError, match="out of range"):
            o2o_cost_matrix(scores, boxes, [7], gt_boxes[:1], MatcherConfig())

    def test_zero_gts(self, rng):
        scores, boxes, _, _ = random_instance(rng, 4, 0)
        cost = o2o_cost_matrix(scores, boxes, [], torch.zeros(0, 4), MatcherConfig())
        assert cost.shape == (4, 0)


class TestHungarian:
    def test_two_by_two_example(self):
        match = hungarian([[1.0, 2.0], [2.0, 4.0]])
        assert match.pairs == ((1, 0), (0, 1))
        assert assignment_cost([[1.0, 2.0], [2.0, 4.0]], match) == 4.0

    def test_diagonal_friendly(self):
        cost = np.ones((4, 4)) - np.eye(4)
        match = hungarian(cost)
        assert match.pairs == ((0, 0), (1, 1), (2, 2), (3, 3))
        assert assignment_cost(cost, match) == 0.0

    def test_equals_brute_force_on_random_floats(self, rng):
        for _ in range(200):
            num_gts = int(rng.integers(1, 6))
            num_queries = int(rng.integers(num_gts, 8))
            cost = rng.normal(size=(num_queries, num_gts))
            match = hungarian(cost)
            pairs, best = brute_force_assignment(cost)
            assert assignment_cost(cost, match) == best
            assert match.pairs == pairs

    def test_tie_break_against_brute_force_on_integers(self, rng):
        # Small integer costs produce many ties; the lexicographic rule must hold.
        for _ in range(300):
            num_gts = int(rng.integers(1, 6))
            num_queries = int(rng.integers(num_gts, 8))
            cost = rng.integers(0, 4, size=(num_queries, num_gts)).astype(np.float64)
            match = hungarian(cost)
            pairs, best = brute_force_assignment(cost)
            assert assignment_cost(cost, match) == best
            assert match.pairs == pairs

    def test_all_zero_costs_pick_identity(self):
        match = hungarian(np.zeros((5, 3)))
        assert match.pairs == ((0, 0), (1, 1), (2, 2))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            hungarian(np.array([[np.nan, 1.0], [1.0, 2.0]]))

    def test_more_gts_than_queries_rejected(self):
        with pytest.raises(ValueError, match="more ground truths"):
            hungarian(np.zeros((2, 3)))

    def test_empty_gts(self):
        assert hungarian(np.zeros((3, 0))).pairs == ()

    def test_query_indices_distinct(self, rng):
        for _ in range(50):
            cost = rng.normal(size=(7, 5))
            match = hungarian(cost)
            queries = match.query_indices
            assert len(set(queries)) == len(queries)
            assert tuple(n for _, n in match.pairs) == tuple(range(5))


class TestMatchScore:
    def test_hand_value(self):
        gt = Box(0.5, 0.5, 0.4, 0.4)
        box = Box(*shifted_box_with_iou(gt.as_tuple(), 0.5))
        value = match_score([0.1, 0.8], box, 1, gt, alpha=0.4)
        assert value == pytest.approx(0.4 * 0.8 + 0.6 * 0.5, abs=1e-9)

    def test_alpha_one_ignores_boxes(self):
        a = Box(0.2, 0.2, 0.1, 0.1)
        b = Box(0.8, 0.8, 0.3, 0.3)
        assert match_score([0.3, 0.7], a, 0, b, alpha=1.0) == pytest.approx(0.3)

    def test_alpha_zero_is_iou(self):
        gt = Box(0.5, 0.5, 0.4, 0.4)
        box = Box(*shifted_box_with_iou(gt.as_tuple(), 0.25))
        assert match_score([0.9, 0.9], box, 0, gt, alpha=0.0) == pytest.approx(0.25, abs=1e-9)

    def test_class_out_of_range(self):
        b = Box(0.5, 0.5, 0.2, 0.2)
        with pytest.raises(ValueError):
            match_score([0.5, 0.5], b, 2, b, alpha=0.5)


def build_o2m_instance():
    """Q=3, N=1 with class scores [0.9, 0.2, 0.6] and IoUs [0.8, 0.9, 0.1]."""
    gt = (0.5, 0.5, 0.4, 0.4)
    boxes = torch.tensor(
        [
            shifted_box_with_iou(gt, 0.8),
            shifted_box_with_iou(gt, 0.9),
            shifted_box_with_iou(gt, 0.1),
        ],
        dtype=torch.float64,
    )
    scores = torch.tensor([[0.9, 0.0], [0.2, 0.0], [0.6, 0.0]], dtype=torch.float64)
    gt_boxes = torch.tensor([gt], dtype=torch.float64)
    gt_classes = torch.tensor([0])
    return scores, boxes, gt_classes, gt_boxes


class TestOneToMany:
    def test_hand_example(self):
        scores, boxes, gt_classes, gt_boxes = build_o2m_instance()
        cfg = MatcherConfig(alpha=0.5, top_k=2, tau=0.4)
        o2o = OneToOneMatch(pairs=((0, 0),))
        out = one_to_many_match(scores, boxes, gt_classes, gt_boxes, o2o, cfg)
        members = out.per_gt[0]
        assert [q for q, _ in members] == [0, 1]
        assert members[0][1] == pytest.approx(0.85, abs=1e-9)
        assert members[1][1] == pytest.approx(0.55, abs=1e-9)

    def test_tau_one_degenerates_to_o2o(self, rng):
        scores, boxes, gt_classes, gt_boxes = random_instance(rng, 6, 3)
        o2o = hungarian(o2o_cost_matrix(scores, boxes, gt_classes, gt_boxes, MatcherConfig()))
        cfg = MatcherConfig(tau=1.0, include_o2o=True)
        out = one_to_many_match(scores, boxes, gt_classes, gt_boxes, o2o, cfg)
        assert out.as_pairs() == list(o2o.pairs)

    def test_no_filtering_takes_all_queries(self, rng):
        scores, boxes, gt_classes, gt_boxes = random_instance(rng, 5, 1)
        o2o = hungarian(o2o_cost_matrix(scores, boxes, gt_classes, gt_boxes, MatcherConfig()))
        cfg = MatcherConfig(top_k=5, tau=0.0)
        out = one_to_many_match(scores, boxes, gt_classes, gt_boxes, o2o, cfg)
        assert sorted(q for q, _ in out.per_gt[0]) == [0, 1, 2, 3, 4]

    def test_conflict_goes_to_higher_score(self):
        # one strong query overlapping two gts; it must stay with the better one
        gt_boxes = torch.tensor(
            [[0.3, 0.5, 0.2, 0.2], [0.315, 0.5, 0.2, 0.2]], dtype=torch.float64
        )
        boxes = torch.tensor(
            [[0.31, 0.5, 0.2, 0.2], [0.7, 0.5, 0.2, 0.2], [0.75, 0.5, 0.2, 0.2]],
            dtype=torch.float64,
        )
        scores = torch.full((3, 2), 0.5, dtype=torch.float64)
        o2o = OneToOneMatch(pairs=((1, 0), (2, 1)))  # keep q0 free of o2o protection
        cfg = MatcherConfig(alpha=0.0, top_k=2, tau=0.0, include_o2o=True)
        out = one_to_many_match(scores, boxes, gt_classes=torch.tensor([0, 0]), gt_boxes=gt_boxes, o2o=o2o, cfg=cfg)
        score_to_gt0 = match_score(scores[0], Box(*boxes[0].tolist()), 0, Box(*gt_boxes[0].tolist()), 0.0)
        score_to_gt1 = match_score(scores[0], Box(*boxes[0].tolist()), 0, Box(*gt_boxes[1].tolist()), 0.0)
        assert score_to_gt1 > score_to_gt0
        gt0_members = [q for q, _ in out.per_gt[0]]
        gt1_members = [q for q, _ in out.per_gt[1]]
        assert 0 in gt1_members and 0 not in gt0_members

    def test_o2o_member_never_reassigned(self):
        scores, boxes, gt_classes, gt_boxes = build_o2m_instance()
        # q1 has the best match score for gt 0, but is declared the o2o match
        # of a second, far-away gt; the union rule pins it there.
        gt_boxes = torch.cat([gt_boxes, torch.tensor([[0.1, 0.1, 0.1, 0.1]], dtype=torch.float64)])
        gt_classes = torch.tensor([0, 1])
        scores = torch.cat([scores, torch.full((3, 0), 0.0, dtype=torch.float64)], dim=1)
        o2o = OneToOneMatch(pairs=((0, 0), (1, 1)))
        cfg = MatcherConfig(alpha=0.5, top_k=3, tau=0.0, include_o2o=True)
        out = one_to_many_match(scores, boxes, gt_classes, gt_boxes, o2o, cfg)
        assert 1 in [q for q, _ in out.per_gt[1]]
        assert 1 not in [q for q, _ in out.per_gt[0]]

    def test_invariants_on_fuzzed_inputs(self, rng):
        for _ in range(300):
            num_gts = int(rng.integers(1, 5))
            num_queries = int(rng.integers(num_gts, 10))
            scores, boxes, gt_classes, gt_boxes = random_instance(rng, num_queries, num_gts)
            cfg = MatcherConfig(
                alpha=float(rng.uniform(0, 1)),
                top_k=int(rng.integers(1, 6)),
                tau=float(rng.uniform(0, 1)),
                include_o2o=True,
            )
            o2o = hungarian(o2o_cost_matrix(scores, boxes, gt_classes, gt_boxes, MatcherConfig()))
            out = one_to_many_match(scores, boxes, gt_classes, gt_boxes, o2o, cfg)
            score_mat = match_score_matrix(scores, boxes, gt_classes, gt_boxes, cfg.alpha)
            seen: set[int] = set()
            for n, members in enumerate(out.per_gt):
                queries = [q for q, _ in members]
                assert o2o.query_for(n) in queries
                assert len(members) <= cfg.top_k + 1
                for q, s in members:
                    assert s == pytest.approx(score_mat[q, n], abs=1e-12)
                    if q != o2o.query_for(n):
                        assert s >= cfg.tau
                    assert q not in seen
                    seen.add(q)

    def test_raising_tau_never_enlarges(self, rng):
        scores, boxes, gt_classes, gt_boxes = random_instance(rng, 8, 3)
        o2o = hungarian(o2o_cost_matrix(scores, boxes, gt_classes, gt_boxes, MatcherConfig()))
        sizes = []
        for tau in (0.0, 0.3, 0.6, 0.9, 1.0):
            cfg = MatcherConfig(top_k=4, tau=tau)
            out = one_to_many_match(scores, boxes, gt_classes, gt_boxes, o2o, cfg)
            sizes.append([len(m) for m in out.per_gt])
        for before, after in zip(sizes, sizes[1:]):
            assert all(b >= a for b, a in zip(before, after))

    def test_raising_k_never_shrinks_union(self, rng):
        scores, boxes, gt_classes, gt_boxes = random_instance(rng, 10, 3)
        o2o = hungarian(o2o_cost_matrix(scores, boxes, gt_classes, gt_boxes, MatcherConfig()))
        previous: set[int] = set()
        for top_k in (1, 2, 4, 8):
            cfg = MatcherConfig(top_k=top_k, tau=0.2)
            out = one_to_many_match(scores, boxes, gt_classes, gt_boxes, o2o, cfg)
            union = {q for members in out.per_gt for q, _ in members}
            assert previous <= union
            previous = union

    def test_ranking_scale_invariance(self, rng):
        # the score is affine in (class score, IoU); a common positive factor
        # cannot change any per-gt ranking
        for _ in range(50):
            s = rng.uniform(0, 1, size=12)
            overlaps = rng.uniform(0, 1, size=12)
            alpha = float(rng.uniform(0, 1))
            factor = float(rng.uniform(0.05, 1.0))
            base = alpha * s + (1 - alpha) * overlaps
            scaled = alpha * (factor * s) + (1 - alpha) * (factor * overlaps)
            assert np.array_equal(np.argsort(-base, kind="stable"), np.argsort(-scaled, kind="stable"))

    def test_zero_gts(self):
        out = one_to_many_match(
            torch.zeros(3, 2), torch.full((3, 4), 0.5), [], torch.zeros(0, 4),
            OneToOneMatch(pairs=()), MatcherConfig(),
        )
        assert out.per_gt == ()

    def test_json_dump_shape(self):
        scores, boxes, gt_classes, gt_boxes = build_o2m_instance()
        o2o = OneToOneMatch(pairs=((0, 0),))
        out = one_to_many_match(scores, boxes, gt_classes, gt_boxes, o2o, MatcherConfig(alpha=0.5, top_k=2, tau=0.4))
        dumped = out.to_json_dict()
        assert set(dumped) == {"0"}
        assert all(len(entry) == 2 for entry in dumped["0"])
