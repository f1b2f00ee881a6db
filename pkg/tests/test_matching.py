"""Sparse matcher: gather/flatten/cosine/window/soft-argmax contracts."""

import numpy as np
import pytest

from sparsematch import autodiff as ad
from sparsematch.autodiff import MASK_SCORE, TAPE, Tensor
from sparsematch.data import SyntheticSpec, generate_pair
from sparsematch.errors import ContractError, DimensionError, InputError, ResourceError
from sparsematch.matching import (
    KeypointSet,
    SimilarityMatrix,
    WindowScores,
    coarse_localize,
    compose_prediction,
    cosine_similarity,
    dense_match_baseline,
    extract_window,
    flatten_target,
    gather_keypoint_features,
    match_features,
    match_pyramid,
    soft_argmax_offset,
    window_half_lo,
)


def kps(points, size=(256, 256), **kw):
    return KeypointSet(np.asarray(points, dtype=float), size, **kw)


class TestGatherKeypointFeatures:
    def test_origin_maps_to_cell_zero(self):
        fmap = Tensor(np.random.default_rng(0).normal(size=(4, 16, 16)))
        rows = gather_keypoint_features(fmap, kps([(0, 0)]), 16)
        assert np.array_equal(rows.data[0], fmap.data[:, 0, 0])

    def test_boundary_pixel_maps_to_last_cell(self):
        fmap = Tensor(np.random.default_rng(1).normal(size=(4, 16, 16)))
        rows = gather_keypoint_features(fmap, kps([(255, 255)]), 16)
        assert np.array_equal(rows.data[0], fmap.data[:, 15, 15])

    def test_rows_match_indexing_oracle(self):
        rng = np.random.default_rng(2)
        fmap = Tensor(rng.normal(size=(6, 8, 8)))
        pts = rng.uniform(0, 127, size=(10, 2))
        rows = gather_keypoint_features(fmap, kps(pts, (128, 128)), 16)
        for i, (x, y) in enumerate(pts):
            assert np.array_equal(rows.data[i], fmap.data[:, int(y // 16), int(x // 16)])

    def test_out_of_bounds_names_keypoint(self):
        fmap = Tensor(np.zeros((2, 4, 4)))
        with pytest.raises(InputError, match="keypoint 1"):
            gather_keypoint_features(fmap, kps([(0, 0), (200, 10)], (256, 256)), 16)


class TestFlattenTarget:
    def test_single_cell_map(self):
        fmap = Tensor(np.array([[[3.0]], [[4.0]]]))
        flat = flatten_target(fmap)
        assert flat.shape == (1, 2)
        assert np.array_equal(flat.data[0], [3.0, 4.0])

    def test_roundtrip_bijection(self):
        x = np.random.default_rng(3).normal(size=(5, 4, 6))
        flat = flatten_target(Tensor(x)).data
        assert np.array_equal(flat.T.reshape(5, 4, 6), x)

    def test_linear_index_arithmetic(self):
        x = np.random.default_rng(4).normal(size=(3, 8, 8))
        flat = flatten_target(Tensor(x)).data
        assert np.array_equal(flat[37], x[:, 4, 5])  # j = y*w + x = 4*8 + 5


class TestCosineSimilarity:
    def test_scaled_copy_scores_one(self):
        a = Tensor(np.array([[1.0, 2.0, 3.0]]))
        b = Tensor(np.array([[3.0, 6.0, 9.0]]))
        sim = cosine_similarity(a, b, (1, 1), 4)
        assert np.isclose(sim.scores.data[0, 0], 1.0)

    def test_orthogonal_rows_score_zero(self):
        a = Tensor(np.array([[1.0, 0.0]]))
        b = Tensor(np.array([[0.0, 5.0]]))
        sim = cosine_similarity(a, b, (1, 1), 4)
        assert np.isclose(sim.scores.data[0, 0], 0.0)

    def test_matches_per_pair_oracle(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(5, 8)), rng.normal(size=(12, 8))
        scores = cosine_similarity(Tensor(a), Tensor(b), (3, 4), 4).scores.data
        for i in range(5):
            for j in range(12):
                expect = a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]))
                assert abs(scores[i, j] - expect) < 1e-6
        assert np.abs(scores).max() <= 1 + 1e-5

    def test_zero_norm_rows_score_zero(self):
        a = Tensor(np.zeros((1, 4)))
        b = Tensor(np.ones((3, 4)))
        sim = cosine_similarity(a, b, (1, 3), 4)
        assert np.array_equal(sim.scores.data, np.zeros((1, 3)))

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(4, 8)), rng.normal(size=(9, 8))
        s1 = cosine_similarity(Tensor(a), Tensor(b), (3, 3), 4).scores.data
        a2 = a.copy()
        a2[2] *= 37.5
        s2 = cosine_similarity(Tensor(a2), Tensor(b), (3, 3), 4).scores.data
        assert np.abs(s1 - s2).max() < 1e-6
        assert np.array_equal(coarse_localize(SimilarityMatrix(Tensor(s1), (3, 3), 4)),
                              coarse_localize(SimilarityMatrix(Tensor(s2), (3, 3), 4)))


class TestCoarseLocalize:
    def test_one_hot_row_decodes_index(self):
        scores = np.zeros((1, 64))
        scores[0, 37] = 1.0
        sim = SimilarityMatrix(Tensor(scores), (8, 8), 4)
        assert np.array_equal(coarse_localize(sim)[0], [5, 4])

    def test_uniform_row_tie_breaks_to_zero(self):
        sim = SimilarityMatrix(Tensor(np.ones((2, 64))), (8, 8), 4)
        assert np.array_equal(coarse_localize(sim), [[0, 0], [0, 0]])

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(7)
        scores = rng.normal(size=(20, 48))
        sim = SimilarityMatrix(Tensor(scores), (6, 8), 4)
        got = coarse_localize(sim)
        for i in range(20):
            best, best_j = -np.inf, -1
            for j in range(48):
                if scores[i, j] > best:
                    best, best_j = scores[i, j], j
            assert got[i, 0] == best_j % 8 and got[i, 1] == best_j // 8


class TestExtractWindow:
    def _sim(self, seed=8, h=8, w=8, n=3):
        scores = np.random.default_rng(seed).normal(size=(n, h * w))
        return SimilarityMatrix(Tensor(scores), (h, w), 4)

    def test_k1_single_cell(self):
        sim = self._sim()
        coarse = coarse_localize(sim)
        win = extract_window(sim, coarse, 1)
        assert win.windows.shape == (3, 1, 1)
        assert win.valid_mask.all()
        for i, (cx, cy) in enumerate(coarse):
            assert win.windows.data[i, 0, 0] == sim.scores.data[i, cy * 8 + cx]

    def test_corner_window_masks_outside(self):
        sim = self._sim()
        win = extract_window(sim, np.array([[0, 0]] * 3), 5)
        assert not win.valid_mask[0, :2, :].any()
        assert not win.valid_mask[0, :, :2].any()
        assert win.valid_mask[0, 2:, 2:].all()
        assert (win.windows.data[0, :2, :] == MASK_SCORE).all()

    def test_interior_window_equals_slice_oracle(self):
        sim = self._sim()
        coarse = np.array([[4, 3]] * 3)
        win = extract_window(sim, coarse, 5)
        grid = sim.scores.data.reshape(3, 8, 8)
        assert np.array_equal(win.windows.data[1], grid[1, 1:6, 2:7])
        assert win.valid_mask.all()

    def test_even_k_asymmetric_extent(self):
        sim = self._sim()
        win = extract_window(sim, np.array([[4, 4]] * 3), 4)
        # half_lo = 1: window spans [3, 7) in both axes
        assert np.array_equal(win.origins[0], [3, 3])
        grid = sim.scores.data.reshape(3, 8, 8)
        assert np.array_equal(win.windows.data[0], grid[0, 3:7, 3:7])


class TestSoftArgmaxOffset:
    def test_uniform_window_gives_center(self):
        win = WindowScores(Tensor(np.zeros((1, 5, 5))), np.zeros((1, 2), int),
                           np.ones((1, 5, 5), bool))
        off = soft_argmax_offset(win, 1.0)
        assert np.allclose(off.data[0], [2.0, 2.0])

    def test_single_valid_cell(self):
        scores = np.full((1, 3, 3), MASK_SCORE)
        scores[0, 2, 1] = 0.3
        mask = np.zeros((1, 3, 3), bool)
        mask[0, 2, 1] = True
        off = soft_argmax_offset(WindowScores(Tensor(scores), np.zeros((1, 2), int), mask), 0.5)
        assert np.allclose(off.data[0], [1.0, 2.0])

    def test_matches_scalar_expectation_oracle(self):
        vals = np.arange(9.0).reshape(1, 3, 3)
        win = WindowScores(Tensor(vals), np.zeros((1, 2), int), np.ones((1, 3, 3), bool))
        off = soft_argmax_offset(win, 1.0)
        e = np.exp(vals.reshape(9) - vals.max())
        p = e / e.sum()
        expect_x = (p * np.tile([0.0, 1.0, 2.0], 3)).sum()
        expect_y = (p * np.repeat([0.0, 1.0, 2.0], 3)).sum()
        assert np.allclose(off.data[0], [expect_x, expect_y], atol=1e-6)

    def test_all_masked_window_rejected(self):
        win = WindowScores(Tensor(np.full((1, 3, 3), MASK_SCORE)),
                           np.zeros((1, 2), int), np.zeros((1, 3, 3), bool))
        with pytest.raises(ContractError):
            soft_argmax_offset(win, 1.0)

    def test_offsets_stay_in_window_range(self):
        rng = np.random.default_rng(9)
        win = WindowScores(Tensor(rng.normal(size=(6, 7, 7))), np.zeros((6, 2), int),
                           np.ones((6, 7, 7), bool))
        off = soft_argmax_offset(win, 0.3).data
        assert (off >= 0).all() and (off <= 6).all()


class TestComposePrediction:
    def test_centered_offset_recovers_coarse(self):
        pred = compose_prediction(np.array([[10, 12]]), np.array([[2.0, 2.0]]), 5, 4)
        assert np.array_equal(pred.final[0], [10.0, 12.0])

    def test_direct_arithmetic(self):
        pred = compose_prediction(np.array([[10, 12]]), np.array([[3.5, 1.0]]), 5, 4)
        assert np.array_equal(pred.final[0], [11.5, 11.0])

    def test_k1_identity(self):
        coarse = np.array([[3, 7], [0, 0]])
        pred = compose_prediction(coarse, np.zeros((2, 2)), 1, 8)
        assert np.array_equal(pred.final, coarse.astype(float))

    def test_identity_for_all_odd_k(self):
        coarse = np.array([[30, 17]])
        for k in range(1, 62, 2):
            center = np.full((1, 2), (k - 1) / 2)
            pred = compose_prediction(coarse, center, k, 4)
            assert np.array_equal(pred.final, coarse.astype(float)), f"k={k}"


class TestDenseBaseline:
    def test_element_count_small(self):
        rng = np.random.default_rng(10)
        f = Tensor(rng.normal(size=(3, 4, 4)))
        dense = dense_match_baseline(f, Tensor(rng.normal(size=(3, 4, 4))))
        assert dense.data.size == 256

    def test_rows_match_sparse_rows(self):
        rng = np.random.default_rng(11)
        fs = Tensor(rng.normal(size=(8, 6, 6)))
        ft = Tensor(rng.normal(size=(8, 6, 6)))
        pts = rng.uniform(0, 95, size=(5, 2))
        keypoints = kps(pts, (96, 96))
        dense = dense_match_baseline(fs, ft).data
        rows = gather_keypoint_features(fs, keypoints, 16)
        sparse = cosine_similarity(rows, flatten_target(ft), (6, 6), 16).scores.data
        cells = (pts[:, 1] // 16).astype(int) * 6 + (pts[:, 0] // 16).astype(int)
        assert np.abs(dense[cells] - sparse).max() < 1e-6
        assert np.array_equal(dense[cells].argmax(axis=1), sparse.argmax(axis=1))

    def test_element_budget_guard(self):
        f = Tensor(np.zeros((2, 8, 8)))
        with pytest.raises(ResourceError, match="4096"):
            dense_match_baseline(f, f, element_budget=4095)

    def test_64x64_element_count(self):
        rng = np.random.default_rng(12)
        f = Tensor(rng.normal(size=(2, 64, 64)).astype(np.float32))
        dense = dense_match_baseline(f, Tensor(rng.normal(size=(2, 64, 64)).astype(np.float32)))
        assert dense.data.size == 16_777_216


class TestMatchPyramid:
    def test_planted_pair_recovered_at_stride4(self):
        spec = SyntheticSpec(seed=21, image_size=(64, 64), n_keypoints=6,
                             collision_rate=0.0, descriptor_dim=32)
        src, tgt, ann = generate_pair(spec)
        preds = match_pyramid(src, tgt, ann.src, k=5, temperature=0.05)
        planted = np.floor(ann.tgt.visible_points() / 4)
        assert np.abs(preds[4].final - planted).max() < 0.5

    def test_self_matching(self):
        rng = np.random.default_rng(13)
        f = Tensor(rng.normal(size=(8, 8, 8)))
        keypoints = kps(rng.uniform(0, 127, (5, 2)), (128, 128))
        pred = match_features(f, f, keypoints, 16, 3, 0.05)
        own = np.stack([np.floor(keypoints.points[:, 0] / 16),
                        np.floor(keypoints.points[:, 1] / 16)], axis=1)
        assert np.array_equal(pred.coarse, own.astype(int))

    def test_cross_scale_consistency_bound_on_smooth_field(self):
        # Smooth descriptor field: peaks survive pooling, so the stride-16
        # argmax stays within one coarse cell of the stride-4 one.
        from sparsematch.model import FeaturePyramid

        rng = np.random.default_rng(22)
        base = Tensor(rng.normal(size=(16, 4, 4)))
        m4 = ad.bilinear_resize(base, 16, 16).data
        pooled8 = m4.reshape(16, 8, 2, 8, 2).mean(axis=(2, 4))
        pooled16 = pooled8.reshape(16, 4, 2, 4, 2).mean(axis=(2, 4))
        pyr = FeaturePyramid(
            {4: Tensor(m4), 8: Tensor(pooled8), 16: Tensor(pooled16)}, (64, 64))
        keypoints = kps(rng.uniform(0, 63, (6, 2)), (64, 64))
        preds = match_pyramid(pyr, pyr, keypoints, k=3, temperature=0.05)
        # sub-cell quantization (3) + window slack (1) per scale, scaled up
        diff = np.abs(preds[16].final * 4 - preds[4].final)
        assert diff.max() <= 8.0

    def test_mismatched_pyramids_rejected(self):
        spec = SyntheticSpec(seed=23, image_size=(64, 64), n_keypoints=3, descriptor_dim=16)
        src, tgt, ann = generate_pair(spec)
        other = generate_pair(SyntheticSpec(seed=23, image_size=(128, 128),
                                            n_keypoints=3, descriptor_dim=16))[1]
        with pytest.raises(ContractError):
            match_pyramid(src, other, ann.src, k=3, temperature=0.05)


class TestWindowCompleteness:
    def test_full_coverage_equals_global(self):
        rng = np.random.default_rng(14)
        h = w = 6
        for _ in range(20):
            scores = rng.uniform(-1, 1, size=(4, h * w))
            sim = SimilarityMatrix(Tensor(scores), (h, w), 4)
            coarse = coarse_localize(sim)
            k = 2 * max(h, w) - 1
            win = extract_window(sim, coarse, k)
            off = soft_argmax_offset(win, 0.1)
            pred = compose_prediction(coarse, off, k, 4)
            p = np.exp((scores - scores.max(axis=1, keepdims=True)) / 0.1)
            p /= p.sum(axis=1, keepdims=True)
            xs = np.tile(np.arange(w), h)
            ys = np.repeat(np.arange(h), w)
            expect = np.stack([p @ xs, p @ ys], axis=1)
            assert np.abs(pred.final - expect).max() < 1e-6


class TestGradientFlow:
    def test_grad_check_through_window_path(self):
        """L2-of-final-coordinates differentiates w.r.t. target features."""
        spec = SyntheticSpec(seed=25, image_size=(64, 64), n_keypoints=3,
                             collision_rate=0.0, descriptor_dim=8)
        src, tgt, ann = generate_pair(spec)
        gt = ann.tgt.visible_points() / 4.0 + 0.3
        src4 = Tensor(src[4].data)

        def f(t):
            pred = match_features(src4, t, ann.src, 4, 5, 0.1)
            diff = ad.sub(pred.node, Tensor(gt, dtype=pred.node.dtype))
            sq = ad.mul(diff, diff)
            dist = ad.sqrt(ad.matmul(sq, Tensor(np.ones((2, 1)))))
            return ad.scale(ad.sum_all(dist), 1.0 / 3)

        err = ad.grad_check_multi(f, Tensor(tgt[4].data))
        assert err < 1e-4

    def test_recompute_counts_valid_cells_only(self):
        TAPE.reset()
        rng = np.random.default_rng(15)
        fs = Tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
        ft = Tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
        keypoints = kps(rng.uniform(0, 127, (4, 2)), (128, 128))
        pred = match_features(fs, ft, keypoints, 16, 5, 0.1, mode="window")
        half = window_half_lo(5)
        expected = 0
        for cx, cy in pred.coarse:
            x0, y0 = cx - half, cy - half
            expected += (min(x0 + 5, 8) - max(x0, 0)) * (min(y0 + 5, 8) - max(y0, 0))
        assert TAPE.phase_counts["similarity"] == expected
