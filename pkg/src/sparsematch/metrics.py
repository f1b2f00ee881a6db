"""Coordinate losses, PCK evaluation and keypoint-fusion statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, InputError
from .matching import KeypointSet, MatchPrediction

PHASE_LOSS = "loss"


@dataclass
class PckReport:
    """Percentage of correct keypoints at one threshold.

    `aggregate` pools raw counts (correct/total) across pairs rather than
    averaging per-pair values, so merging reports is associative.
    """

    alpha: float
    reference: str
    per_pair_pck: list
    correct: int
    total: int

    @property
    def aggregate(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass
class FusionReport:
    """Per-resolution counts of keypoints sharing a feature cell."""

    per_resolution: dict
    input_size: tuple

    def fused_fraction(self, feature_size) -> float:
        fused, total = self.per_resolution[tuple(feature_size)]
        return fused / total if total else 0.0


def _as_coord_node(pred) -> Tensor:
    if isinstance(pred, Tensor):
        node = pred
    else:
        node = Tensor(np.asarray(pred, dtype=np.float64))
    if node.data.ndim != 2 or node.data.shape[1] != 2:
        raise ContractError(f"coordinates must be (n, 2), got {node.data.shape}")
    return node


def l2_coord_loss(pred, gt) -> Tensor:
    """Mean Euclidean distance between predicted and ground-truth points.

    `pred` may be a live Tensor (gradients flow) or a plain array; `gt` is
    array-like (n, 2). The mean reduction keeps the magnitude independent
    of how many keypoints a pair has.
    """
    pred = _as_coord_node(pred)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if gt.shape[0] != pred.data.shape[0]:
        raise ContractError(
            f"prediction/ground-truth length mismatch: {pred.data.shape[0]} vs {gt.shape[0]}"
        )
    n = gt.shape[0]
    if n == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    with ad.TAPE.phase(PHASE_LOSS):
        diff = ad.sub(pred, Tensor(gt, dtype=pred.dtype))
        sq = ad.mul(diff, diff)
        row_sum = ad.matmul(sq, Tensor(np.ones((2, 1)), dtype=pred.dtype))
        dist = ad.sqrt(row_sum)
        return ad.scale(ad.sum_all(dist), 1.0 / n)


def multiscale_loss(predictions: dict, gt: KeypointSet | np.ndarray,
                    strides=(16, 8, 4)) -> Tensor:
    """Sum of per-stride L2 losses, each rescaled into image pixels.

    Every stride's final coordinates are multiplied by the stride before
    comparison so the three terms share units and unit weights are
    meaningful.
    """
    missing = [s for s in strides if s not in predictions]
    if missing:
        raise ContractError(f"multiscale_loss: missing strides {missing}")
    if isinstance(gt, KeypointSet):
        gt_pts = gt.visible_points()
    else:
        gt_pts = np.asarray(gt, dtype=np.float64)
    total = None
    for stride in strides:
        pred = predictions[stride]
        node = pred.node if isinstance(pred, MatchPrediction) else None
        coords = node if node is not None else (
            pred.final if isinstance(pred, MatchPrediction) else pred
        )
        if isinstance(coords, Tensor):
            with ad.TAPE.phase(PHASE_LOSS):
                coords_px = ad.scale(coords, float(stride))
        else:
            coords_px = np.asarray(coords) * float(stride)
        term = l2_coord_loss(coords_px, gt_pts)
        if total is None:
            total = term
        else:
            with ad.TAPE.phase(PHASE_LOSS):
                total = ad.add(total, term)
    return total


def pck(pred, gt: KeypointSet, alpha: float, reference: str = "image") -> PckReport:
    """PCK@alpha for one pair: fraction of visible keypoints whose error is
    strictly below alpha * max(H, W) of the reference frame."""
    if reference not in ("image", "bbox"):
        raise InputError(f"reference must be 'image' or 'bbox', got {reference!r}")
    if isinstance(pred, KeypointSet):
        if len(pred) != len(gt):
            raise ContractError("prediction/ground-truth keypoint counts differ")
        mask = pred.visibility & gt.visibility
        pred_pts = pred.points[mask]
        gt_pts = gt.points[mask]
    else:
        pred_pts = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
        gt_pts = gt.visible_points()
        if pred_pts.shape[0] != gt_pts.shape[0]:
            raise ContractError("prediction/ground-truth keypoint counts differ")
    if reference == "bbox":
        if gt.bbox is None:
            raise InputError("bbox reference requested but ground truth has no bbox")
        x0, y0, x1, y1 = gt.bbox
        ref_max = max(abs(x1 - x0), abs(y1 - y0))
    else:
        ref_max = max(gt.image_size)
    threshold = alpha * ref_max
    dist = np.linalg.norm(pred_pts - gt_pts, axis=1)
    correct = int((dist < threshold).sum())
    total = int(len(gt_pts))
    value = correct / total if total else 0.0
    return PckReport(alpha=alpha, reference=reference, per_pair_pck=[value],
                     correct=correct, total=total)


def merge_pck_reports(reports) -> PckReport:
    reports = list(reports)
    if not reports:
        raise ContractError("cannot merge an empty report list")
    alpha = reports[0].alpha
    reference = reports[0].reference
    if any(r.alpha != alpha or r.reference != reference for r in reports):
        raise ContractError("cannot merge reports with different alpha/reference")
    return PckReport(
        alpha=alpha,
        reference=reference,
        per_pair_pck=[v for r in reports for v in r.per_pair_pck],
        correct=sum(r.correct for r in reports),
        total=sum(r.total for r in reports),
    )


def fusion_stats(annotations, input_size: tuple, feature_sizes) -> FusionReport:
    """Count keypoints that share a feature cell with another keypoint.

    Every KeypointSet is first rescaled to `input_size`; a visible keypoint
    is "fused" at feature size (h, w) when at least one other visible
    keypoint of the same set lands in its cell under floor(x*w/W),
    floor(y*h/H) bucketing - the same map used to gather descriptors.
    """
    ih, iw = input_size
    per_resolution = {}
    for fsize in feature_sizes:
        fh, fw = fsize
        fused = 0
        total = 0
        for kps in annotations:
            scaled = kps.rescaled((ih, iw))
            pts = scaled.visible_points()
            total += len(pts)
            if len(pts) < 2:
                continue
            cx = np.floor(pts[:, 0] * fw / iw).astype(np.int64)
            cy = np.floor(pts[:, 1] * fh / ih).astype(np.int64)
            cells = cy * fw + cx
            _, inverse, counts = np.unique(cells, return_inverse=True, return_counts=True)
            fused += int((counts[inverse] > 1).sum())
        per_resolution[(fh, fw)] = (fused, total)
    return FusionReport(per_resolution=per_resolution, input_size=(ih, iw))
