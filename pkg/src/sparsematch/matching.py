"""Sparse keypoint matching with window-based coarse-to-fine localization.

Given a source feature map, a target feature map and annotated source
keypoints, the matcher gathers one descriptor per keypoint, scores it
against every target position by cosine similarity, takes the argmax as a
coarse location and refines it with a temperature-controlled soft-argmax
over a k x k window around the coarse cell.

The production path (`match_pyramid` / mode "window") computes the full
n x M similarity with tape recording disabled (the argmax needs no
gradient) and then recomputes only the valid window cells with recording
enabled, so the tape retains O(k^2) score elements per keypoint instead of
O(M). Modes "global" and "dense" are foils used for oracle checks and for
the memory benchmark: "global" records the full n x M sparse similarity
and soft-argmaxes whole rows; "dense" additionally records the M x M
matrix over all source positions, the way exhaustive matchers do.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_SCORE, TAPE, Tensor
from .errors import ContractError, DimensionError, InputError, ResourceError

#: Phase labels used for tape-element accounting.
PHASE_FEATURES = "decoder"
PHASE_SIMILARITY = "similarity"
PHASE_WINDOWS = "windows"


@dataclass
class KeypointSet:
    """Keypoints in image-pixel coordinates.

    `points` has shape (n, 2) ordered (x, y); `image_size` is (H, W);
    `bbox` is (x0, y0, x1, y1) or None; `visibility` marks points that
    participate in matching and evaluation.
    """

    points: np.ndarray
    image_size: tuple
    bbox: tuple | None = None
    visibility: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.visibility is None:
            self.visibility = np.ones(len(self.points), dtype=bool)
        else:
            self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.visibility.shape != (len(self.points),):
            raise InputError("visibility mask length must match keypoint count")
        h, w = self.image_size
        vis = self.points[self.visibility]
        if vis.size and not (
            (vis[:, 0] >= 0).all() and (vis[:, 0] < w).all()
            and (vis[:, 1] >= 0).all() and (vis[:, 1] < h).all()
        ):
            raise InputError(f"visible keypoints must lie inside {w}x{h}")

    def __len__(self):
        return len(self.points)

    @property
    def n_visible(self) -> int:
        return int(self.visibility.sum())

    def visible_points(self) -> np.ndarray:
        return self.points[self.visibility]

    def rescaled(self, new_size: tuple) -> "KeypointSet":
        """Affine-map coordinates (and bbox) into a new image size."""
        h0, w0 = self.image_size
        h1, w1 = new_size
        sx, sy = w1 / w0, h1 / h0
        pts = self.points * np.array([sx, sy])
        bbox = None
        if self.bbox is not None:
            x0, y0, x1, y1 = self.bbox
            bbox = (x0 * sx, y0 * sy, x1 * sx, y1 * sy)
        return KeypointSet(pts, (h1, w1), bbox, self.visibility.copy())


@dataclass
class SimilarityMatrix:
    """Cosine scores of n keypoints against M = h*w target positions.

    Linear index j encodes position (y, x) as j = y*w + x.
    """

    scores: Tensor
    map_size: tuple
    stride: int

    def __post_init__(self):
        h, w = self.map_size
        if self.scores.shape[1] != h * w:
            raise DimensionError(
                f"similarity has {self.scores.shape[1]} columns, map {h}x{w} needs {h * w}"
            )

    @property
    def n(self):
        return self.scores.shape[0]


@dataclass
class WindowScores:
    """Per-keypoint k x k score windows cut around coarse locations.

    `origins` holds the (ox, oy) map coordinates of each window's top-left
    cell; cells outside the map are masked in `valid_mask` and carry the
    sentinel score -1e9 so they receive exactly zero softmax weight.
    """

    windows: Tensor
    origins: np.ndarray
    valid_mask: np.ndarray

    @property
    def k(self):
        return self.valid_mask.shape[1]


@dataclass
class MatchPrediction:
    """Composed localization output at one stride, in feature coordinates."""

    coarse: np.ndarray
    offset: np.ndarray
    final: np.ndarray
    stride: int
    # Live autodiff node of `final` (n, 2); present when recorded.
    node: Tensor | None = field(default=None, repr=False)


def keypoint_cells(kps: KeypointSet, stride: int, map_size: tuple) -> np.ndarray:
    """Map visible keypoints to flat feature-cell indices (floor(x/stride))."""
    h, w = map_size
    pts = kps.visible_points()
    cx = np.floor(pts[:, 0] / stride).astype(np.int64)
    cy = np.floor(pts[:, 1] / stride).astype(np.int64)
    bad = (cx < 0) | (cx >= w) | (cy < 0) | (cy >= h)
    if bad.any():
        vis_idx = np.flatnonzero(kps.visibility)
        raise InputError(
            f"keypoint {int(vis_idx[np.argmax(bad)])} maps outside the {h}x{w} "
            f"feature map at stride {stride}"
        )
    return cy * w + cx


def gather_keypoint_features(feature_map: Tensor, kps: KeypointSet, stride: int) -> Tensor:
    """Row i is the descriptor at visible keypoint i's feature cell."""
    c, h, w = feature_map.shape
    cells = keypoint_cells(kps, stride, (h, w))
    flat = flatten_target(feature_map)
    with TAPE.phase(PHASE_FEATURES):
        return ad.gather_rows(flat, cells)


def flatten_target(feature_map: Tensor) -> Tensor:
    """Reshape (C, h, w) into (M, C) with row j = y*w + x. View-only."""
    c = feature_map.shape[0]
    return ad.transpose2d(ad.reshape(feature_map, (c, -1)))


def cosine_similarity(keypoint_features: Tensor, target_flat: Tensor,
                      map_size: tuple, stride: int) -> SimilarityMatrix:
    """Per-row-normalized cosine scores; entries lie in [-1, 1].

    Zero-norm descriptors score 0 against everything, so they can never
    win the argmax against any nonzero competitor.
    """
    with TAPE.phase(PHASE_SIMILARITY):
        scores = ad.cosine_rows(keypoint_features, target_flat)
    return SimilarityMatrix(scores, map_size, stride)


def coarse_localize(similarity: SimilarityMatrix) -> np.ndarray:
    """Argmax cell per keypoint as (p_x, p_y); ties pick the lowest index."""
    h, w = similarity.map_size
    j = similarity.scores.data.argmax(axis=1)
    return np.stack([j % w, j // w], axis=1).astype(np.int64)


def window_half_lo(k: int) -> int:
    return (k - 1) // 2


def _window_geometry(coarse: np.ndarray, k: int, map_size: tuple):
    """Window origins plus flat map indices and validity for every cell."""
    h, w = map_size
    half = window_half_lo(k)
    origins = coarse - half
    offs = np.arange(k)
    wx = origins[:, 0, None, None] + offs[None, None, :]
    wy = origins[:, 1, None, None] + offs[None, :, None]
    valid = (wx >= 0) & (wx < w) & (wy >= 0) & (wy < h)
    flat_idx = np.where(valid, wy * w + wx, 0)
    return origins, flat_idx, valid


def extract_window(similarity: SimilarityMatrix, coarse: np.ndarray, k: int) -> WindowScores:
    """Cut k x k windows centered on the coarse cells, masking out-of-map cells."""
    if k < 1:
        raise ContractError(f"window size must be >= 1, got {k}")
    origins, flat_idx, valid = _window_geometry(coarse, k, similarity.map_size)
    n = coarse.shape[0]
    with TAPE.phase(PHASE_WINDOWS):
        win = ad.gather_window(
            similarity.scores, flat_idx.reshape(n, k * k), valid.reshape(n, k * k)
        )
        win = ad.reshape(win, (n, k, k))
    return WindowScores(win, origins, valid)


def soft_argmax_offset(windows: WindowScores, temperature: float) -> Tensor:
    """Expected (x', y') in window coordinates under a softmax over valid cells.

    Masked cells carry the -1e9 sentinel and get exactly zero weight; the
    result is differentiable with respect to the window scores and lies in
    [0, k-1] per axis.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    n, k = windows.valid_mask.shape[0], windows.k
    if n and not windows.valid_mask.reshape(n, -1).any(axis=1).all():
        raise ContractError("soft_argmax_offset: a window has no valid cells")
    offs = np.arange(k, dtype=np.float64)
    coords = np.stack(
        [np.tile(offs, k), np.repeat(offs, k)], axis=1
    )  # row j=y*k+x -> (x, y)
    with TAPE.phase(PHASE_WINDOWS):
        probs = ad.softmax(ad.reshape(windows.windows, (n, k * k)), temperature)
        return ad.matmul(probs, Tensor(coords, dtype=probs.dtype))


def compose_prediction(coarse: np.ndarray, offset, k: int, stride: int) -> MatchPrediction:
    """Final map coordinate: window origin plus the predicted offset."""
    node = offset if isinstance(offset, Tensor) else None
    off = offset.data if isinstance(offset, Tensor) else np.asarray(offset, dtype=np.float64)
    origins = (coarse - window_half_lo(k)).astype(np.float64)
    if node is not None:
        with TAPE.phase(PHASE_WINDOWS):
            node = ad.add(node, Tensor(origins, dtype=node.dtype))
        final = node.data
    else:
        final = origins + off
    return MatchPrediction(coarse=coarse.copy(), offset=off, final=final,
                           stride=stride, node=node)


# ---------------------------------------------------------------------------
# Single-scale matching in the three memory regimes
# ---------------------------------------------------------------------------


def dense_match_baseline(source_map: Tensor, target_map: Tensor,
                         element_budget: int | None = None) -> Tensor:
    """Full pairwise cosine matrix over all M source x M target positions."""
    if source_map.shape != target_map.shape:
        raise DimensionError(
            f"dense baseline needs equal maps, got {source_map.shape} vs {target_map.shape}"
        )
    c, h, w = source_map.shape
    m = h * w
    if element_budget is not None and m * m > element_budget:
        raise ResourceError(
            f"dense correlation would record {m * m} elements, budget is {element_budget}"
        )
    with TAPE.phase(PHASE_SIMILARITY):
        return ad.cosine_rows(flatten_target(source_map), flatten_target(target_map))


def _global_softargmax(scores: Tensor, map_size: tuple, stride: int,
                       temperature: float) -> MatchPrediction:
    """Soft-argmax over entire similarity rows (no window restriction)."""
    h, w = map_size
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    coords = np.stack([np.tile(xs, h), np.repeat(ys, w)], axis=1)
    j = scores.data.argmax(axis=1)
    coarse = np.stack([j % w, j // w], axis=1).astype(np.int64)
    with TAPE.phase(PHASE_WINDOWS):
        probs = ad.softmax(scores, temperature)
        node = ad.matmul(probs, Tensor(coords, dtype=probs.dtype))
    return MatchPrediction(coarse=coarse, offset=node.data.copy(), final=node.data,
                           stride=stride, node=node if node.requires_grad else None)


def match_features(source_map: Tensor, target_map: Tensor, kps: KeypointSet,
                   stride: int, k: int, temperature: float, mode: str = "window",
                   element_budget: int | None = None) -> MatchPrediction:
    """Match one feature-map pair under the chosen memory regime.

    mode "window" is the production coarse-to-fine path; "global" and
    "dense" are the soft-argmax-over-full-rows foils described in the
    module docstring.
    """
    c, h, w = target_map.shape
    if source_map.shape[0] != c:
        raise DimensionError("source/target channel counts differ")
    cells = keypoint_cells(kps, stride, source_map.shape[1:])
    tgt_flat = flatten_target(target_map)

    if mode == "dense":
        dense = dense_match_baseline(source_map, target_map, element_budget)
        with TAPE.phase(PHASE_WINDOWS):
            rows = ad.gather_rows(dense, cells)
        return _global_softargmax(rows, (h, w), stride, temperature)

    with TAPE.phase(PHASE_FEATURES):
        src_flat = flatten_target(source_map)
        keypoint_feats = ad.gather_rows(src_flat, cells)

    if mode == "global":
        sim = cosine_similarity(keypoint_feats, tgt_flat, (h, w), stride)
        return _global_softargmax(sim.scores, (h, w), stride, temperature)

    if mode != "window":
        raise ContractError(f"unknown matching mode {mode!r}")

    # Coarse pass: full similarity without recording (argmax needs no grad).
    with TAPE.paused():
        coarse_sim = cosine_similarity(keypoint_feats, tgt_flat, (h, w), stride)
        coarse = coarse_localize(coarse_sim)

    # Fine pass: recompute only the valid window cells with recording on.
    n = coarse.shape[0]
    origins, flat_idx, valid = _window_geometry(coarse, k, (h, w))
    flat_valid = valid.reshape(n, k * k)
    row_ids = np.broadcast_to(np.arange(n)[:, None], (n, k * k))
    with TAPE.phase(PHASE_SIMILARITY):
        scores = ad.cosine_pairs(
            keypoint_feats, tgt_flat,
            row_ids[flat_valid], flat_idx.reshape(n, k * k)[flat_valid],
        )
    with TAPE.phase(PHASE_WINDOWS):
        dense_pos = np.flatnonzero(flat_valid)
        win = ad.scatter_flat(scores, dense_pos, (n, k * k), MASK_SCORE)
        win = ad.reshape(win, (n, k, k))
    windows = WindowScores(win, origins, valid)
    offsets = soft_argmax_offset(windows, temperature)
    return compose_prediction(coarse, offsets, k, stride)


def match_pyramid(source: "FeaturePyramid", target: "FeaturePyramid", kps: KeypointSet,
                  k: int, temperature: float, mode: str = "window") -> dict:
    """Run matching independently at strides 16, 8 and 4."""
    if source.input_size != target.input_size:
        raise ContractError(
            f"pyramids describe different inputs: {source.input_size} vs {target.input_size}"
        )
    if set(source.by_stride) != set(target.by_stride):
        raise ContractError("pyramids carry different stride sets")
    return {
        stride: match_features(source[stride], target[stride], kps, stride, k,
                               temperature, mode=mode)
        for stride in sorted(source.by_stride, reverse=True)
    }
