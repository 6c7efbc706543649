import math

import numpy as np
import pytest
import torch

from refgrounder.boxes import BoundingBox
from refgrounder.dethead import (ANCHOR_BASED, ANCHOR_FREE, AnchorSet,
                                 AssignmentMap, HeadError, LossSpec,
                                 PredictionGrid, assign_targets,
                                 assign_targets_multi, box_loss,
                                 confidence_loss, decode_grid, encode_box,
                                 default_anchor_sets, iou_giou_torch,
                                 kmeans_anchors, load_anchor_file, match_anchor,
                                 select_prediction, total_loss)
from refgrounder.augment import MixInfo

ANCHORS = AnchorSet(((30.0, 30.0), (60.0, 60.0)))


def grid_of(raw, stride=32, paradigm=ANCHOR_FREE, anchors=None, literal=False):
    return PredictionGrid(raw=raw, stride=stride, paradigm=paradigm,
                          anchors=anchors, literal_power=literal)


def zero_grid(h, w, n=1, stride=32, paradigm=ANCHOR_FREE, anchors=None,
              dtype=torch.float64):
    return grid_of(torch.zeros(h, w, n, 5, dtype=dtype), stride, paradigm, anchors)


class TestDecode:
    def test_zero_offsets_anchor_based(self):
        g = zero_grid(8, 8, n=2, paradigm=ANCHOR_BASED, anchors=ANCHORS)
        boxes = decode_grid(g)
        # cell (gx=3, gy=4): center lands at (3.5, 4.5) cells
        got = boxes[4, 3, 0]
        assert got[0].item() == pytest.approx(3.5 * 32)
        assert got[1].item() == pytest.approx(4.5 * 32)
        assert got[2].item() == pytest.approx(30.0)
        assert boxes[4, 3, 1, 2].item() == pytest.approx(60.0)

    def test_zero_offsets_anchor_free(self):
        boxes = decode_grid(zero_grid(4, 4, stride=32))
        assert boxes[0, 0, 0, 2].item() == pytest.approx(32.0)  # exp(0) * stride

    def test_saturated_center_stays_in_cell(self):
        raw = torch.zeros(2, 2, 1, 5, dtype=torch.float64)
        raw[..., 0] = 40.0  # sigmoid -> 1
        boxes = decode_grid(grid_of(raw, stride=1))
        assert boxes[0, 0, 0, 0].item() <= 1.0
        assert boxes[0, 0, 0, 0].item() > 0.99

    def test_width_monotone_in_offset(self):
        raw = torch.zeros(1, 1, 1, 5, dtype=torch.float64)
        widths = []
        for tw in (-1.0, 0.0, 1.0, 2.0):
            raw[..., 2] = tw
            widths.append(decode_grid(grid_of(raw, stride=16))[0, 0, 0, 2].item())
        assert widths == sorted(widths)

    def test_decoded_centers_inside_cell_sweep(self):
        rng = np.random.default_rng(0)
        raw = torch.from_numpy(rng.uniform(-4, 4, (6, 6, 2, 5)))
        boxes = decode_grid(grid_of(raw, stride=8, paradigm=ANCHOR_BASED,
                                    anchors=ANCHORS))
        for gy in range(6):
            for gx in range(6):
                cx = boxes[gy, gx, :, 0] / 8
                cy = boxes[gy, gx, :, 1] / 8
                assert torch.all((cx > gx) & (cx < gx + 1))
                assert torch.all((cy > gy) & (cy < gy + 1))


class TestEncodeDecodeRoundTrip:
    @pytest.mark.parametrize("paradigm", [ANCHOR_BASED, ANCHOR_FREE])
    def test_raw_roundtrip(self, paradigm):
        rng = np.random.default_rng(1)
        anchors = ANCHORS if paradigm == ANCHOR_BASED else None
        stride = 32
        worst = 0.0
        for _ in range(500):
            t = np.concatenate([rng.uniform(-4, 4, 2), rng.uniform(-3, 3, 2)])
            raw = torch.zeros(5, 5, len(anchors) if anchors else 1, 5,
                              dtype=torch.float64)
            gy, gx, a = 2, 3, (1 if anchors else 0)
            raw[gy, gx, a, :4] = torch.from_numpy(t)
            g = grid_of(raw, stride, paradigm, anchors)
            box = decode_grid(g)[gy, gx, a]
            anchor = anchors.sizes[a] if anchors else None
            back = encode_box(box.tolist(), stride, (gx, gy), paradigm, anchor)
            worst = max(worst, float(torch.max(torch.abs(back - raw[gy, gx, a, :4]))))
        assert worst < 1e-6

    def test_literal_power_roundtrip(self):
        rng = np.random.default_rng(2)
        anchors = AnchorSet(((30.0, 30.0),))
        for _ in range(200):
            t = np.concatenate([rng.uniform(-4, 4, 2), rng.uniform(-1, 1, 2)])
            raw = torch.zeros(3, 3, 1, 5, dtype=torch.float64)
            raw[1, 1, 0, :4] = torch.from_numpy(t)
            g = grid_of(raw, 32, ANCHOR_BASED, anchors, literal=True)
            box = decode_grid(g)[1, 1, 0]
            back = encode_box(box.tolist(), 32, (1, 1), ANCHOR_BASED,
                              anchors.sizes[0], literal_power=True)
            assert torch.max(torch.abs(back - raw[1, 1, 0, :4])) < 1e-6

    def test_literal_and_product_agree_at_zero(self):
        anchors = AnchorSet(((30.0, 30.0),))
        raw = torch.zeros(1, 1, 1, 5, dtype=torch.float64)
        product = decode_grid(grid_of(raw.clone(), 32, ANCHOR_BASED, anchors))
        literal = decode_grid(grid_of(raw.clone(), 32, ANCHOR_BASED, anchors,
                                      literal=True))
        assert torch.allclose(product, literal)

    def test_anchor_count_mismatch_rejected(self):
        with pytest.raises(HeadError):
            grid_of(torch.zeros(2, 2, 1, 5), 32, ANCHOR_BASED, ANCHORS)


class TestAssignment:
    def test_center_cell(self):
        box = BoundingBox(cx=208, cy=208, w=40, h=40)
        a = assign_targets(box, (13, 13), 32, ANCHOR_FREE)
        assert a.pos == (6, 6, 0)  # floor(208 / 32) = 6

    def test_prior_argmax_hand_computed(self):
        # concentric IoUs: (30,30) -> 0.5625, (60,60) -> 1600/3600
        box = BoundingBox(cx=100, cy=100, w=40, h=40)
        assert match_anchor(ANCHORS, box) == 0
        a = assign_targets(box, (13, 13), 32, ANCHOR_BASED, ANCHORS)
        assert a.pos[2] == 0

    def test_tie_breaks_to_first_prior(self):
        anchors = AnchorSet(((40.0, 40.0), (40.0, 40.0)))
        box = BoundingBox(cx=100, cy=100, w=40, h=40)
        assert match_anchor(anchors, box) == 0

    def test_exactly_one_positive(self):
        box = BoundingBox(cx=50, cy=70, w=20, h=30)
        a = assign_targets(box, (8, 8), 16, ANCHOR_BASED, ANCHORS)
        assert int(a.conf.sum()) == 1

    def test_regression_target_is_exact_encode(self):
        box = BoundingBox(cx=100, cy=100, w=40, h=40)
        a = assign_targets(box, (13, 13), 32, ANCHOR_FREE, dtype=torch.float64)
        gy, gx, _ = a.pos
        raw = torch.zeros(13, 13, 1, 5, dtype=torch.float64)
        raw[gy, gx, 0, :4] = a.t_target
        decoded = decode_grid(grid_of(raw, 32))[gy, gx, 0]
        np.testing.assert_allclose(decoded.numpy(), [100, 100, 40, 40], atol=1e-9)

    def test_degenerate_gt_rejected(self):
        with pytest.raises(Exception):
            assign_targets(BoundingBox(10, 10, 1e-9, 1e-9), (4, 4), 32, ANCHOR_FREE)

    def test_multi_scale_single_positive(self):
        grids = [zero_grid(16, 16, stride=8), zero_grid(8, 8, stride=16),
                 zero_grid(4, 4, stride=32)]
        box = BoundingBox(cx=64, cy=64, w=30, h=30)
        assignments = assign_targets_multi(box, grids)
        positives = [a for a in assignments if a.has_positive]
        assert len(positives) == 1
        total = sum(int(a.conf.sum()) for a in assignments)
        assert total == 1

    def test_center_radius_adds_confidence_positives(self):
        box = BoundingBox(cx=100, cy=100, w=40, h=40)
        base = assign_targets(box, (13, 13), 32, ANCHOR_FREE)
        widened = assign_targets(box, (13, 13), 32, ANCHOR_FREE, center_radius=1)
        assert int(base.conf.sum()) == 1
        assert int(widened.conf.sum()) == 9  # 3x3 neighborhood
        assert widened.pos == base.pos  # regression slot unchanged
        assert torch.equal(widened.t_target, base.t_target)

    def test_center_radius_clipped_at_border(self):
        box = BoundingBox(cx=5, cy=5, w=8, h=8)  # cell (0, 0)
        widened = assign_targets(box, (4, 4), 32, ANCHOR_FREE, center_radius=1)
        assert int(widened.conf.sum()) == 4  # 2x2 corner neighborhood

    def test_multi_scale_prefers_native_stride(self):
        grids = [zero_grid(16, 16, stride=8), zero_grid(4, 4, stride=32)]
        small = assign_targets_multi(BoundingBox(cx=65, cy=65, w=8, h=8), grids)
        large = assign_targets_multi(BoundingBox(cx=65, cy=65, w=34, h=34), grids)
        assert small[0].has_positive and not small[1].has_positive
        assert large[1].has_positive and not large[0].has_positive


class TestConfidenceLoss:
    def test_perfect_logits_near_zero(self):
        targets = torch.zeros(4, 4, 1)
        targets[2, 2, 0] = 1.0
        logits = torch.where(targets > 0, 30.0, -30.0)
        assert confidence_loss(logits, targets, "bce").item() < 1e-6

    def test_bce_scalar_hand_value(self):
        # prob 0.5 against target 0: -ln(0.5)
        logits = torch.zeros(1, 1, 1)
        targets = torch.zeros(1, 1, 1)
        val = confidence_loss(logits, targets, "bce").item()
        assert val == pytest.approx(math.log(2.0), abs=1e-7)

    def test_label_smoothing_targets(self):
        logits = torch.zeros(1, 1, 2)
        targets = torch.tensor([[[0.0, 1.0]]])
        eps = 0.2
        got = confidence_loss(logits, targets, "bce_label_smooth",
                              label_smooth_eps=eps).item()
        smoothed = torch.tensor([[[eps / 2, 1 - eps / 2]]])
        want = torch.nn.functional.binary_cross_entropy_with_logits(
            logits, smoothed, reduction="sum").item()
        assert got == pytest.approx(want, abs=1e-9)

    def test_focal_gamma_zero_alpha_half_is_half_bce(self):
        rng = np.random.default_rng(3)
        logits = torch.from_numpy(rng.normal(0, 2, (5, 5, 2)))
        targets = torch.from_numpy((rng.random((5, 5, 2)) < 0.3).astype(np.float64))
        focal = confidence_loss(logits, targets, "focal", focal_gamma=0.0,
                                focal_alpha=0.5).item()
        bce = confidence_loss(logits, targets, "bce").item()
        assert focal == pytest.approx(0.5 * bce, rel=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(HeadError):
            confidence_loss(torch.zeros(2, 2, 1), torch.zeros(2, 2, 2))


class TestBoxLoss:
    def test_perfect_overlap_zero(self):
        b = torch.tensor([10.0, 10.0, 4.0, 4.0])
        assert box_loss(b, b, "iou").item() == pytest.approx(0.0, abs=1e-9)
        assert box_loss(b, b, "giou").item() == pytest.approx(0.0, abs=1e-9)
        assert box_loss(b, b, "mse_raw").item() == 0.0
        assert box_loss(b, b, "smooth_l1_raw").item() == 0.0

    def test_giou_disjoint_hand_case(self):
        # unit boxes with a one-unit gap: IoU 0, union 2, enclosing 3
        a = torch.tensor([0.5, 0.5, 1.0, 1.0], dtype=torch.float64)
        b = torch.tensor([2.5, 0.5, 1.0, 1.0], dtype=torch.float64)
        iou, giou = iou_giou_torch(a, b)
        assert iou.item() == pytest.approx(0.0, abs=1e-12)
        assert giou.item() == pytest.approx(-1.0 / 3.0, abs=1e-12)
        assert box_loss(a, b, "giou").item() == pytest.approx(4.0 / 3.0, abs=1e-12)

    def test_giou_never_exceeds_iou(self):
        rng = np.random.default_rng(4)
        centers = rng.uniform(5, 60, (1000, 2, 2))
        sizes = rng.uniform(1, 30, (1000, 2, 2))
        a = torch.from_numpy(np.concatenate([centers[:, 0], sizes[:, 0]], axis=1))
        b = torch.from_numpy(np.concatenate([centers[:, 1], sizes[:, 1]], axis=1))
        iou, giou = iou_giou_torch(a, b)
        assert torch.all(giou <= iou + 1e-12)

    def test_zero_only_at_match(self):
        # loss == 0 must imply the prediction equals the target
        rng = np.random.default_rng(9)
        target_raw = torch.from_numpy(rng.normal(0, 1, 4))
        target_box = torch.tensor([50.0, 50.0, 20.0, 16.0], dtype=torch.float64)
        for _ in range(100):
            off_raw = target_raw + torch.from_numpy(rng.normal(0, 1, 4))
            if torch.allclose(off_raw, target_raw):
                continue
            assert box_loss(off_raw, target_raw, "mse_raw").item() > 0
            assert box_loss(off_raw, target_raw, "smooth_l1_raw").item() > 0
            shift = torch.from_numpy(np.concatenate([rng.uniform(1, 10, 2),
                                                     rng.uniform(1, 5, 2)]))
            off_box = target_box + shift
            assert box_loss(off_box, target_box, "iou").item() > 1e-6
            assert box_loss(off_box, target_box, "giou").item() > 1e-6

    def test_losses_nonnegative_random_sweep(self):
        rng = np.random.default_rng(5)
        for variant in ("mse_raw", "smooth_l1_raw", "iou", "giou"):
            for _ in range(50):
                if variant.endswith("_raw"):
                    p = torch.from_numpy(rng.normal(0, 2, 4))
                    t = torch.from_numpy(rng.normal(0, 2, 4))
                else:
                    p = torch.from_numpy(np.concatenate([rng.uniform(5, 60, 2),
                                                         rng.uniform(1, 30, 2)]))
                    t = torch.from_numpy(np.concatenate([rng.uniform(5, 60, 2),
                                                         rng.uniform(1, 30, 2)]))
                assert box_loss(p, t, variant).item() >= -1e-9


def perfect_grid(box, h=4, w=4, stride=32, paradigm=ANCHOR_FREE, anchors=None,
                 conf_logit=30.0):
    assignment = assign_targets(box, (h, w), stride, paradigm, anchors,
                                dtype=torch.float64)
    n = len(anchors) if anchors else 1
    raw = torch.full((h, w, n, 5), -30.0, dtype=torch.float64)
    raw[..., :4] = 0.0
    gy, gx, a = assignment.pos
    raw[gy, gx, a, :4] = assignment.t_target
    raw[gy, gx, a, 4] = conf_logit
    return grid_of(raw, stride, paradigm, anchors), assignment


class TestTotalLoss:
    def test_perfect_prediction_zero(self):
        box = BoundingBox(cx=70, cy=70, w=30, h=30)
        for variant in ("mse_raw", "smooth_l1_raw", "iou", "giou"):
            grid, assignment = perfect_grid(box)
            total, parts = total_loss(grid, assignment, LossSpec(box=variant))
            assert total.item() == pytest.approx(0.0, abs=1e-6)

    def test_zero_conf_targets_remove_box_term(self):
        box = BoundingBox(cx=70, cy=70, w=30, h=30)
        grid, assignment = perfect_grid(box)
        grid.raw[1, 1, 0, :4] = 7.0  # corrupt regression somewhere
        hollow = AssignmentMap(conf=torch.zeros_like(assignment.conf),
                               pos=None, t_target=None, box_target=None)
        total, parts = total_loss(grid, hollow, LossSpec(box="iou"))
        assert parts["box"].item() == 0.0
        assert total.item() == pytest.approx(parts["conf"].item())

    def test_mix_lambda_one_equals_unmixed(self):
        box = BoundingBox(cx=70, cy=70, w=30, h=30)
        grid, assignment = perfect_grid(box)
        grid.raw[2, 2, 0, :4] = 0.3
        plain, _ = total_loss(grid, assignment, LossSpec(box="iou"))
        mixed, _ = total_loss(grid, assignment, LossSpec(box="iou"),
                              mix=MixInfo(lam=1.0, partner_box=box))
        assert mixed.item() == pytest.approx(plain.item(), abs=1e-12)

    def test_mix_dual_target_weights_partner(self):
        box_a = BoundingBox(cx=70, cy=70, w=30, h=30)
        box_b = BoundingBox(cx=40, cy=100, w=20, h=24)
        grid, assignment = perfect_grid(box_a)
        partner = assign_targets(box_b, (4, 4), 32, ANCHOR_FREE,
                                 dtype=torch.float64)
        lam = 0.7
        spec = LossSpec(box="iou", mix_dual_target=True)
        total, parts = total_loss(grid, assignment, spec,
                                  mix=MixInfo(lam=lam, partner_box=box_b),
                                  partner_assignments=[partner])
        # base term is zero (perfect); remaining box loss is (1 - lam) times
        # the partner's own loss
        solo = total_loss(grid, partner, LossSpec(box="iou"))[0] \
            - total_loss(grid, AssignmentMap(conf=partner.conf, pos=None,
                                             t_target=None, box_target=None),
                         LossSpec(box="iou"))[0]
        assert parts["box"].item() == pytest.approx((1 - lam) * solo.item(),
                                                    abs=1e-9)


class TestSelectPrediction:
    def test_argmax_cell_wins(self):
        raw = torch.full((3, 3, 1, 5), -5.0, dtype=torch.float64)
        raw[1, 2, 0, 4] = 5.0
        box, conf = select_prediction(grid_of(raw, 32))
        assert conf == pytest.approx(torch.sigmoid(torch.tensor(5.0)).item())
        assert 2 * 32 < box.cx < 3 * 32
        assert 1 * 32 < box.cy < 2 * 32

    def test_tie_breaks_lowest_flat_index(self):
        raw = torch.zeros(2, 2, 1, 5, dtype=torch.float64)
        box_a, _ = select_prediction(grid_of(raw, 32))
        assert box_a.cx == pytest.approx(0.5 * 32)
        assert box_a.cy == pytest.approx(0.5 * 32)

    def test_monotone_logit_transform_invariant(self):
        rng = np.random.default_rng(6)
        raw = torch.from_numpy(rng.normal(0, 1, (4, 4, 2, 5)))
        g1 = grid_of(raw, 32, ANCHOR_BASED, ANCHORS)
        scaled = raw.clone()
        scaled[..., 4] = scaled[..., 4] * 3.0 + 1.0
        g2 = grid_of(scaled, 32, ANCHOR_BASED, ANCHORS)
        b1, _ = select_prediction(g1)
        b2, _ = select_prediction(g2)
        assert b1.corners() == pytest.approx(b2.corners())

    def test_scale_merge_associativity(self):
        rng = np.random.default_rng(7)
        g_fine = grid_of(torch.from_numpy(rng.normal(0, 1, (8, 8, 1, 5))), 16)
        g_coarse = grid_of(torch.from_numpy(rng.normal(0, 1, (4, 4, 1, 5))), 32)
        merged_box, merged_conf = select_prediction([g_fine, g_coarse])
        separate = [select_prediction(g_fine), select_prediction(g_coarse)]
        best = max(separate, key=lambda bc: bc[1])
        assert merged_conf == pytest.approx(best[1])
        assert merged_box.corners() == pytest.approx(best[0].corners())


class TestAnchorsIO:
    def test_kmeans_recovers_clusters(self):
        rng = np.random.default_rng(8)
        cluster_a = rng.normal([20, 20], 1.0, (100, 2))
        cluster_b = rng.normal([80, 40], 1.5, (100, 2))
        centers = kmeans_anchors(np.vstack([cluster_a, cluster_b]), 2, seed=0)
        assert np.allclose(centers[0], [20, 20], atol=2.0)
        assert np.allclose(centers[1], [80, 40], atol=2.0)

    def test_anchor_file_roundtrip(self, tmp_path):
        path = tmp_path / "anchors.json"
        path.write_text("[[[10, 13], [16, 30]], [[30, 61], [62, 45]]]")
        sets = load_anchor_file(path)
        assert len(sets) == 2
        assert sets[0].sizes[1] == (16.0, 30.0)

    def test_default_fallback_scales_with_resolution(self):
        base = default_anchor_sets([8, 16, 32], resolution=416)
        doubled = default_anchor_sets([8, 16, 32], resolution=832)
        assert doubled[0].sizes[0][0] == pytest.approx(2 * base[0].sizes[0][0])

    def test_positive_priors_enforced(self):
        with pytest.raises(HeadError):
            AnchorSet(((0.0, 10.0),))
