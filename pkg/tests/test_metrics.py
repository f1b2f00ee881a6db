"""Losses, PCK and fusion statistics against scalar oracles."""

import numpy as np
import pytest

from sparsematch import autodiff as ad
from sparsematch.autodiff import Tensor
from sparsematch.errors import ContractError, InputError
from sparsematch.matching import KeypointSet, MatchPrediction
from sparsematch.metrics import (
    fusion_stats,
    l2_coord_loss,
    merge_pck_reports,
    multiscale_loss,
    pck,
)


class TestL2CoordLoss:
    def test_coincident_points_give_zero(self):
        pts = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert l2_coord_loss(pts, pts).item() == 0.0

    def test_three_four_five_triangle(self):
        assert np.isclose(l2_coord_loss([[3.0, 4.0]], [[0.0, 0.0]]).item(), 5.0)

    def test_mean_reduction(self):
        loss = l2_coord_loss([[3.0, 4.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]])
        assert np.isclose(loss.item(), 2.5)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            l2_coord_loss([[0.0, 0.0]], [[0.0, 0.0], [1.0, 1.0]])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        gt = rng.normal(size=(4, 2))
        x = rng.normal(size=(4, 2)) + 2.0
        err = ad.grad_check(lambda t: l2_coord_loss(t, gt), Tensor(x))
        assert err < 1e-4

    def test_invariant_under_common_permutation(self):
        rng = np.random.default_rng(1)
        pred = rng.normal(size=(6, 2))
        gt = rng.normal(size=(6, 2))
        perm = rng.permutation(6)
        a = l2_coord_loss(pred, gt).item()
        b = l2_coord_loss(pred[perm], gt[perm]).item()
        assert np.isclose(a, b)


def _preds(stride_coords):
    return {
        s: MatchPrediction(coarse=np.zeros_like(c, dtype=int), offset=np.zeros_like(c),
                           final=np.asarray(c, float), stride=s)
        for s, c in stride_coords.items()
    }


class TestMultiscaleLoss:
    def test_exact_predictions_give_zero(self):
        gt_px = np.array([[32.0, 16.0], [8.0, 40.0]])
        preds = _preds({s: gt_px / s for s in (16, 8, 4)})
        assert multiscale_loss(preds, gt_px).item() == 0.0

    def test_unit_weights_sum(self):
        gt_px = np.array([[10.0, 10.0]])
        # Each scale off by the same pixel distance -> total is 3x one term.
        preds = _preds({s: (gt_px + [3.0, 4.0]) / s for s in (16, 8, 4)})
        assert np.isclose(multiscale_loss(preds, gt_px).item(), 15.0)

    def test_equals_sum_of_l2_oracle_calls(self):
        rng = np.random.default_rng(2)
        gt_px = rng.uniform(10, 50, size=(5, 2))
        preds = _preds({s: rng.uniform(0, 60 / s, size=(5, 2)) for s in (16, 8, 4)})
        expect = sum(
            l2_coord_loss(preds[s].final * s, gt_px).item() for s in (16, 8, 4)
        )
        assert np.isclose(multiscale_loss(preds, gt_px).item(), expect)

    def test_missing_stride_rejected(self):
        preds = _preds({4: np.zeros((1, 2)), 8: np.zeros((1, 2))})
        with pytest.raises(ContractError):
            multiscale_loss(preds, np.zeros((1, 2)))

    def test_at_least_stride4_alone(self):
        rng = np.random.default_rng(3)
        gt_px = rng.uniform(10, 50, size=(4, 2))
        preds = _preds({s: rng.uniform(0, 60 / s, size=(4, 2)) for s in (16, 8, 4)})
        full = multiscale_loss(preds, gt_px).item()
        alone = l2_coord_loss(preds[4].final * 4, gt_px).item()
        assert full >= alone

    def test_accepts_keypoint_set(self):
        gt = KeypointSet(np.array([[12.0, 20.0]]), (64, 64))
        preds = _preds({s: np.array([[12.0, 20.0]]) / s for s in (16, 8, 4)})
        assert multiscale_loss(preds, gt).item() == 0.0


class TestPck:
    def test_exact_predictions(self):
        gt = KeypointSet(np.array([[5.0, 5.0], [20.0, 30.0]]), (100, 100))
        for alpha in (0.01, 0.05, 0.2):
            assert pck(gt.points, gt, alpha).aggregate == 1.0

    def test_threshold_arithmetic(self):
        # distances 5 and 20 against threshold 0.1 * max(100, 80) = 10
        gt = KeypointSet(np.array([[40.0, 40.0], [10.0, 10.0]]), (100, 80))
        pred = np.array([[45.0, 40.0], [30.0, 10.0]])
        report = pck(pred, gt, 0.1)
        assert report.aggregate == 0.5
        assert (report.correct, report.total) == (1, 2)

    def test_strict_inequality(self):
        gt = KeypointSet(np.array([[0.0, 0.0]]), (100, 100))
        exactly_at = np.array([[10.0, 0.0]])  # distance == alpha * 100
        assert pck(exactly_at, gt, 0.1).aggregate == 0.0

    def test_matches_scalar_oracle_image_and_bbox(self):
        rng = np.random.default_rng(4)
        for trial in range(200):
            n = int(rng.integers(1, 8))
            h, w = int(rng.integers(40, 200)), int(rng.integers(40, 200))
            bbox = tuple(sorted(rng.uniform(0, w, 2))) + tuple(sorted(rng.uniform(0, h, 2)))
            bbox = (bbox[0], bbox[2], bbox[1], bbox[3])
            gt = KeypointSet(rng.uniform(0, [w - 1, h - 1], size=(n, 2)), (h, w), bbox=bbox)
            pred = gt.points + rng.normal(scale=10, size=(n, 2))
            alpha = float(rng.uniform(0.02, 0.3))
            for reference in ("image", "bbox"):
                if reference == "image":
                    ref = max(h, w)
                else:
                    ref = max(bbox[2] - bbox[0], bbox[3] - bbox[1])
                correct = 0
                for i in range(n):
                    d = np.hypot(*(pred[i] - gt.points[i]))
                    if d < alpha * ref:
                        correct += 1
                report = pck(pred, gt, alpha, reference)
                assert report.correct == correct, (trial, reference)

    def test_bbox_reference_requires_bbox(self):
        gt = KeypointSet(np.array([[1.0, 1.0]]), (10, 10))
        with pytest.raises(InputError):
            pck(gt.points, gt, 0.1, "bbox")

    def test_monotone_in_alpha(self):
        rng = np.random.default_rng(5)
        gt = KeypointSet(rng.uniform(0, 90, (20, 2)), (100, 100))
        pred = gt.points + rng.normal(scale=8, size=(20, 2))
        pred = np.clip(pred, 0, 99)
        values = [pck(pred, gt, a).aggregate for a in (0.01, 0.05, 0.1, 0.2, 0.5)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_merge_pools_counts(self):
        gt1 = KeypointSet(np.array([[0.0, 0.0]]), (100, 100))
        gt2 = KeypointSet(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]), (100, 100))
        r1 = pck(gt1.points, gt1, 0.1)
        r2 = pck(gt2.points + 50.0, gt2, 0.1)
        merged = merge_pck_reports([r1, r2])
        assert (merged.correct, merged.total) == (1, 4)
        assert merged.aggregate == 0.25

    def test_only_visible_keypoints_count(self):
        gt = KeypointSet(np.array([[5.0, 5.0], [50.0, 50.0]]), (100, 100),
                         visibility=[True, False])
        pred = KeypointSet(np.array([[5.0, 5.0], [90.0, 90.0]]), (100, 100))
        report = pck(pred, gt, 0.05)
        assert (report.correct, report.total) == (1, 1)


def brute_force_fusion(sets, input_size, feature_size):
    ih, iw = input_size
    fh, fw = feature_size
    fused = total = 0
    for kps in sets:
        scaled = kps.rescaled((ih, iw))
        pts = scaled.visible_points()
        cells = [(int(y * fh / ih), int(x * fw / iw)) for x, y in pts]
        for i, c in enumerate(cells):
            total += 1
            if any(j != i and cells[j] == c for j in range(len(cells))):
                fused += 1
    return fused, total


class TestFusionStats:
    def test_single_keypoint_never_fused(self):
        sets = [KeypointSet(np.array([[10.0, 10.0]]), (256, 256)) for _ in range(5)]
        report = fusion_stats(sets, (256, 256), [(16, 16), (32, 32), (64, 64)])
        assert all(f == 0 for f, _ in report.per_resolution.values())

    def test_hand_case(self):
        sets = [KeypointSet(np.array([[10.0, 10.0], [12.0, 12.0], [100.0, 100.0]]),
                            (256, 256))]
        report = fusion_stats(sets, (256, 256), [(16, 16)])
        assert report.per_resolution[(16, 16)] == (2, 3)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        for trial in range(50):
            sets = []
            for _ in range(rng.integers(1, 6)):
                n = int(rng.integers(1, 12))
                h, w = int(rng.integers(100, 400)), int(rng.integers(100, 400))
                sets.append(KeypointSet(rng.uniform(0, [w - 1, h - 1], (n, 2)), (h, w)))
            for fsize in ((16, 16), (32, 32), (13, 7)):
                report = fusion_stats(sets, (256, 256), [fsize])
                assert report.per_resolution[fsize] == brute_force_fusion(
                    sets, (256, 256), fsize), trial

    def test_monotone_over_nested_grids(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            sets = [KeypointSet(rng.uniform(0, 255, (int(rng.integers(2, 15)), 2)),
                                (256, 256)) for _ in range(4)]
            report = fusion_stats(sets, (256, 256), [(16, 16), (32, 32), (64, 64)])
            f16 = report.per_resolution[(16, 16)][0]
            f32 = report.per_resolution[(32, 32)][0]
            f64 = report.per_resolution[(64, 64)][0]
            assert f16 >= f32 >= f64

    def test_invisible_points_excluded(self):
        sets = [KeypointSet(np.array([[10.0, 10.0], [11.0, 11.0]]), (256, 256),
                            visibility=[True, False])]
        report = fusion_stats(sets, (256, 256), [(16, 16)])
        assert report.per_resolution[(16, 16)] == (0, 1)
