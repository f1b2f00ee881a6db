"""Training-memory accounting for the three matching regimes.

Two channels are reported per configuration:

* tape elements - the exact number of array elements recorded for the
  backward pass, broken down by phase. This is platform independent and is
  the primary signal: the similarity phase records exactly M*M (dense),
  n*M (sparse) or the number of valid window cells (sparse + window).
* peak bytes - best-effort peak allocation measured with tracemalloc,
  platform and allocator dependent, reported for context.
"""

from __future__ import annotations

import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import TAPE, Tensor
from .data import SyntheticSpec, generate_pair
from .errors import ContractError
from .matching import (
    PHASE_SIMILARITY,
    PHASE_WINDOWS,
    keypoint_cells,
    match_features,
    window_half_lo,
)
from .metrics import l2_coord_loss

CONFIGS = ("dense_baseline", "sparse_only", "sparse_plus_window")

_MODE_BY_CONFIG = {
    "dense_baseline": "dense",
    "sparse_only": "global",
    "sparse_plus_window": "window",
}


@dataclass
class MemoryReport:
    label: str
    tape_elements: int
    peak_bytes: int
    breakdown: dict = field(default_factory=dict)
    workload_key: str = ""

    def phase(self, name: str) -> int:
        return self.breakdown.get(name, 0)


def _workload_key(spec: SyntheticSpec, k: int) -> str:
    h, w = spec.image_size
    return f"{h}x{w}/n{spec.n_keypoints}/c{spec.descriptor_dim}/seed{spec.seed}/k{k}"


def expected_similarity_elements(config: str, map_size: tuple, n: int, k: int,
                                 coarse: np.ndarray | None = None) -> int:
    """Closed-form tape cost of the similarity phase for each regime."""
    h, w = map_size
    m = h * w
    if config == "dense_baseline":
        return m * m
    if config == "sparse_only":
        return n * m
    if config == "sparse_plus_window":
        if coarse is None:
            raise ContractError("sparse_plus_window needs coarse cells to count valid window cells")
        half = window_half_lo(k)
        x0 = coarse[:, 0] - half
        y0 = coarse[:, 1] - half
        wx = np.minimum(x0 + k, w) - np.maximum(x0, 0)
        wy = np.minimum(y0 + k, h) - np.maximum(y0, 0)
        return int((np.clip(wx, 0, None) * np.clip(wy, 0, None)).sum())
    raise ContractError(f"unknown config {config!r}")


def measure(config: str, workload: SyntheticSpec, k: int, temperature: float = 0.05,
            element_budget: int | None = None) -> MemoryReport:
    """Run one forward+backward of the matcher under `config` and report.

    The workload supplies generator feature maps at stride 4 (decoder
    bypassed, so the decoder phase only carries descriptor gathering); the
    loss is the mean L2 distance to the planted target cells.
    """
    if config not in CONFIGS:
        raise ContractError(f"config must be one of {CONFIGS}, got {config!r}")
    src_pyr, tgt_pyr, ann = generate_pair(workload, output="features")
    source = Tensor(src_pyr[4].data, requires_grad=True)
    target = Tensor(tgt_pyr[4].data, requires_grad=True)
    gt_cells = ann.tgt.visible_points() / 4.0

    TAPE.reset()
    tracemalloc.start()
    try:
        pred = match_features(
            source, target, ann.src, stride=4, k=k, temperature=temperature,
            mode=_MODE_BY_CONFIG[config], element_budget=element_budget,
        )
        coords = pred.node if pred.node is not None else Tensor(pred.final)
        loss = l2_coord_loss(coords, gt_cells)
        if loss.requires_grad:
            ad.backward(loss)
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()

    breakdown = {name: count for name, count in TAPE.phase_counts.items() if count}
    return MemoryReport(
        label=config,
        tape_elements=TAPE.element_count,
        peak_bytes=int(peak),
        breakdown=breakdown,
        workload_key=_workload_key(workload, k),
    )


def measure_all(workload: SyntheticSpec, k: int, temperature: float = 0.05,
                element_budget: int | None = None) -> list:
    return [measure(c, workload, k, temperature, element_budget) for c in CONFIGS]


def reduction_ratio(baseline: MemoryReport, optimized: MemoryReport) -> float:
    """Fractional peak-allocation saving of `optimized` over `baseline`."""
    if baseline.workload_key != optimized.workload_key:
        raise ContractError(
            f"reports describe different workloads: "
            f"{baseline.workload_key!r} vs {optimized.workload_key!r}"
        )
    if baseline.peak_bytes == 0:
        raise ContractError("baseline peak is zero; ratio undefined")
    return 1.0 - optimized.peak_bytes / baseline.peak_bytes


def element_reduction_ratio(baseline: MemoryReport, optimized: MemoryReport) -> float:
    """Same ratio on the platform-independent tape-element channel."""
    if baseline.workload_key != optimized.workload_key:
        raise ContractError("reports describe different workloads")
    if baseline.tape_elements == 0:
        raise ContractError("baseline recorded zero elements; ratio undefined")
    return 1.0 - optimized.tape_elements / baseline.tape_elements


def gradient_equivalence(workload: SyntheticSpec, k: int, temperature: float = 0.01):
    """Max grad discrepancy between sparse_only and sparse_plus_window.

    Meaningful when the soft-argmax mass is concentrated inside the window
    for every keypoint (sharp temperature, planted descriptors); then the
    window recomputation must not change the gradients the optimizer sees.
    Returns the discrepancy normalized by the largest gradient magnitude.
    """
    src_pyr, tgt_pyr, ann = generate_pair(workload, output="features")
    gt_cells = ann.tgt.visible_points() / 4.0
    grads = {}
    for mode in ("global", "window"):
        source = Tensor(src_pyr[4].data, requires_grad=True)
        target = Tensor(tgt_pyr[4].data, requires_grad=True)
        pred = match_features(source, target, ann.src, stride=4, k=k,
                              temperature=temperature, mode=mode)
        ad.backward(l2_coord_loss(pred.node, gt_cells))
        grads[mode] = (source.grad.copy(), target.grad.copy())
    scale = max(
        float(np.abs(g).max()) for pair in grads.values() for g in pair
    )
    scale = max(scale, 1e-12)
    diff = max(
        float(np.abs(grads["global"][i] - grads["window"][i]).max()) for i in range(2)
    )
    return diff / scale
