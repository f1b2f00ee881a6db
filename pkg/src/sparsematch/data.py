"""Tensor files, annotation records and the synthetic pair generator.

Binary tensors use the "SMTF" format (see `write_tensor`). Annotations
travel as one JSON record per line; `load_benchmark_pairs` additionally
understands a SPair-71k-style directory of per-pair JSON files.

The synthetic generator builds correspondence problems with exact ground
truth: each source keypoint carries a planted descriptor that is, by
construction, the global cosine nearest neighbor at its target cell in the
stride-4 map. A configurable fraction of keypoints is planted in colliding
stride-16 cells to reproduce the keypoint-fusion phenomenon at desk scale.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, FormatError, InputError
from .matching import KeypointSet
from .model import FeaturePyramid

TENSOR_MAGIC = b"SMTF"
TENSOR_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


# ---------------------------------------------------------------------------
# SMTF tensor files
# ---------------------------------------------------------------------------


def write_tensor(path, tensor):
    """Write a tensor as SMTF: magic "SMTF", u32 version=1, u8 dtype code
    (1=f32, 2=f64), u8 ndim, ndim x u64 dims, little-endian raw data."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if arr.dtype not in _DTYPE_CODES:
        raise ContractError(f"SMTF stores float32/float64 only, got {arr.dtype}")
    if arr.ndim == 0 or any(d == 0 for d in arr.shape):
        raise ContractError(f"refusing to write tensor with empty shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", TENSOR_VERSION))
        fh.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor file while reading {what}", offset=fh.tell())
    return buf


def read_tensor(path) -> Tensor:
    """Read an SMTF file; round-trips written tensors bit-exactly."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TENSOR_MAGIC:
            raise FormatError(f"bad tensor magic {magic!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != TENSOR_VERSION:
            raise FormatError(f"unsupported tensor version {version}", offset=4)
        (code,) = struct.unpack("<B", _read_exact(fh, 1, "dtype code"))
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}", offset=8)
        (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
        dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "dims"))
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(dims))
        raw = _read_exact(fh, dtype.itemsize * count, "tensor data")
        extra = fh.read(1)
        if extra:
            raise FormatError("trailing bytes after tensor data", offset=fh.tell() - 1)
    return Tensor(np.frombuffer(raw, dtype=dtype).reshape(dims))


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------


@dataclass
class PairAnnotation:
    """Source/target keypoint sets with aligned indices."""

    src: KeypointSet
    tgt: KeypointSet
    category: str = "unknown"
    pair_id: str = ""

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise InputError(
                f"pair {self.pair_id!r}: keypoint counts differ "
                f"({len(self.src)} vs {len(self.tgt)})"
            )

    def common_visible(self) -> np.ndarray:
        return self.src.visibility & self.tgt.visibility

    def masked(self) -> "PairAnnotation":
        """Restrict both sides to keypoints visible in both images."""
        mask = self.common_visible()
        return PairAnnotation(
            src=KeypointSet(self.src.points[mask], self.src.image_size, self.src.bbox),
            tgt=KeypointSet(self.tgt.points[mask], self.tgt.image_size, self.tgt.bbox),
            category=self.category,
            pair_id=self.pair_id,
        )


def _kps_to_record(kps: KeypointSet) -> dict:
    rec = {
        "size": [int(kps.image_size[0]), int(kps.image_size[1])],
        "kps": [[float(x), float(y)] for x, y in kps.points],
        "vis": [bool(v) for v in kps.visibility],
    }
    if kps.bbox is not None:
        rec["bbox"] = [float(v) for v in kps.bbox]
    return rec


def _kps_from_record(rec: dict, where: str) -> KeypointSet:
    try:
        return KeypointSet(
            points=np.asarray(rec["kps"], dtype=np.float64),
            image_size=(int(rec["size"][0]), int(rec["size"][1])),
            bbox=tuple(rec["bbox"]) if rec.get("bbox") is not None else None,
            visibility=np.asarray(rec["vis"], dtype=bool) if "vis" in rec else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed keypoint record in {where}: {exc}") from exc


def save_annotations(path, pairs):
    """One JSON record per line per pair."""
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            record = {
                "pair_id": pair.pair_id,
                "category": pair.category,
                "src": _kps_to_record(pair.src),
                "tgt": _kps_to_record(pair.tgt),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_annotations(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"annotation file not found: {path}")
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            where = f"{path}:{lineno}"
            pairs.append(
                PairAnnotation(
                    src=_kps_from_record(rec["src"], where),
                    tgt=_kps_from_record(rec["tgt"], where),
                    category=rec.get("category", "unknown"),
                    pair_id=rec.get("pair_id", f"line{lineno}"),
                )
            )
    return pairs


def _load_spair_pair(path: Path) -> PairAnnotation:
    """SPair-71k-style per-pair JSON.

    Field mapping (see README): src_kps/trg_kps are [x, y] lists of the
    mutually visible keypoints, src_imsize/trg_imsize are [W, H, ...] and
    src_bndbox/trg_bndbox are [x0, y0, x1, y1].
    """
    try:
        rec = json.loads(path.read_text(encoding="utf-8"))
        sides = []
        for side in ("src", "trg"):
            w, h = rec[f"{side}_imsize"][0], rec[f"{side}_imsize"][1]
            bbox = rec.get(f"{side}_bndbox")
            sides.append(
                KeypointSet(
                    points=np.asarray(rec[f"{side}_kps"], dtype=np.float64),
                    image_size=(int(h), int(w)),
                    bbox=tuple(bbox) if bbox is not None else None,
                )
            )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"malformed SPair-style annotation {path}: {exc}") from exc
    category = rec.get("category", path.stem.split(":")[-1] if ":" in path.stem else "unknown")
    return PairAnnotation(src=sides[0], tgt=sides[1], category=category, pair_id=path.stem)


def load_benchmark_pairs(root, dialect: str = "spair", split: str = "test",
                         input_size: tuple | None = None) -> list:
    """Load external benchmark annotations into PairAnnotation records.

    dialect "spair" expects root/PairAnnotation/<split>/*.json files;
    dialect "jsonl" expects root to be (or contain) an annotation file
    named <split>.jsonl. With `input_size`, coordinates and boxes are
    rescaled into that frame.
    """
    root = Path(root)
    if not root.exists():
        raise InputError(f"dataset root not found: {root}")
    if dialect == "jsonl":
        path = root if root.is_file() else root / f"{split}.jsonl"
        pairs = load_annotations(path)
    elif dialect == "spair":
        pair_dir = root / "PairAnnotation" / split
        if not pair_dir.is_dir():
            raise InputError(f"missing SPair-style annotation directory: {pair_dir}")
        files = sorted(pair_dir.glob("*.json"))
        if not files:
            raise InputError(f"no pair annotations under {pair_dir}")
        pairs = [_load_spair_pair(p) for p in files]
    else:
        raise InputError(f"unknown dialect {dialect!r}")
    if input_size is not None:
        pairs = [
            PairAnnotation(
                src=p.src.rescaled(input_size),
                tgt=p.tgt.rescaled(input_size),
                category=p.category,
                pair_id=p.pair_id,
            )
            for p in pairs
        ]
    return pairs


# ---------------------------------------------------------------------------
# Synthetic correspondence pairs
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Parameters of one generated pair (deterministic under `seed`)."""

    seed: int = 0
    image_size: tuple = (64, 64)
    n_keypoints: int = 8
    collision_rate: float = 0.0
    descriptor_dim: int = 32
    noise_sigma: float = 0.0

    def __post_init__(self):
        h, w = self.image_size
        if h % 16 or w % 16:
            raise InputError(f"image size must be divisible by 16, got {h}x{w}")
        if self.n_keypoints < 1:
            raise InputError("need at least one keypoint")
        if not 0.0 <= self.collision_rate <= 1.0:
            raise InputError("collision_rate must lie in [0, 1]")


def _collision_plan(spec: SyntheticSpec):
    """Number of colliding keypoints (paired in shared stride-16 cells)."""
    n_collide = 2 * round(spec.collision_rate * spec.n_keypoints / 2)
    if spec.collision_rate > 0 and spec.n_keypoints < 2:
        raise InputError("collision_rate > 0 needs at least two keypoints")
    n_pairs = n_collide // 2
    n_single = spec.n_keypoints - n_collide
    h, w = spec.image_size
    # The collision-free side needs one stride-16 cell per keypoint.
    cells_needed = max(n_pairs + n_single, spec.n_keypoints)
    cells_avail = (h // 16) * (w // 16)
    if cells_needed > cells_avail:
        raise InputError(
            f"{spec.n_keypoints} keypoints at collision_rate {spec.collision_rate} "
            f"need {cells_needed} stride-16 cells, map has {cells_avail}"
        )
    return n_pairs, n_single


def _place_keypoints(rng, spec: SyntheticSpec, collide: bool):
    """Pixel coordinates on stride-4 cell centers.

    When `collide`, the first 2*n_pairs keypoints land pairwise inside
    shared stride-16 cells (in distinct stride-4 sub-cells); everything
    else occupies its own stride-16 cell.
    """
    n_pairs, n_single = _collision_plan(spec)
    if not collide:
        n_pairs, n_single = 0, spec.n_keypoints
    h, w = spec.image_size
    gh, gw = h // 16, w // 16
    take = iter(rng.permutation(gh * gw))
    sub = np.arange(16)  # stride-4 sub-cells inside one stride-16 cell
    coords = []
    for _ in range(n_pairs):
        cy, cx = divmod(int(next(take)), gw)
        for p in rng.choice(sub, size=2, replace=False):
            sy, sx = divmod(int(p), 4)
            coords.append((cx * 4 + sx, cy * 4 + sy))
    for _ in range(n_single):
        cy, cx = divmod(int(next(take)), gw)
        sy, sx = divmod(int(rng.integers(16)), 4)
        coords.append((cx * 4 + sx, cy * 4 + sy))
    cells4 = np.asarray(coords, dtype=np.int64)  # stride-4 cell coordinates
    pixels = cells4 * 4 + 2  # cell centers in pixel units
    return cells4, pixels.astype(np.float64)


MAX_BACKGROUND_COSINE = 0.6


def _background_map(rng, spec: SyntheticSpec, descriptors: np.ndarray, shape):
    """Random cells whose cosine against every planted descriptor stays below
    MAX_BACKGROUND_COSINE, so planted cells always win the argmax."""
    c = spec.descriptor_dim
    cells = rng.standard_normal((shape[0] * shape[1], c))
    unit = descriptors / np.linalg.norm(descriptors, axis=1, keepdims=True)
    for _ in range(64):
        norms = np.linalg.norm(cells, axis=1, keepdims=True)
        cos = (cells / norms) @ unit.T
        bad = np.abs(cos).max(axis=1) >= MAX_BACKGROUND_COSINE
        if not bad.any():
            break
        cells[bad] = rng.standard_normal((int(bad.sum()), c))
    else:
        raise InputError("could not sample background cells away from descriptors")
    return cells.reshape(shape[0], shape[1], c)


def _pool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling over the leading two (spatial) axes."""
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def generate_pair(spec: SyntheticSpec, output: str = "features"):
    """Build one synthetic correspondence pair with exact ground truth.

    output "features" returns (src FeaturePyramid, tgt FeaturePyramid,
    PairAnnotation) where the stride-4 maps carry the planted descriptors
    and coarser maps are average-pooled from them (which is what fuses
    colliding keypoints). output "images" returns (src Tensor, tgt Tensor,
    PairAnnotation) with a distinctive 3x3 color stamp per keypoint.
    """
    if output not in ("features", "images"):
        raise InputError(f"unknown output kind {output!r}")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    h, w = spec.image_size

    # Source keypoints realize the requested collisions; targets never
    # collide so each planted cell stays uniquely identifiable.
    src_cells, src_px = _place_keypoints(rng, spec, collide=True)
    tgt_cells, tgt_px = _place_keypoints(rng, spec, collide=False)
    n = spec.n_keypoints

    ann = PairAnnotation(
        src=KeypointSet(src_px, (h, w)),
        tgt=KeypointSet(tgt_px, (h, w)),
        category="synthetic",
        pair_id=f"syn-{spec.seed}",
    )

    if output == "images":
        # Signed distinctive stamps on a zero-mean background: zero-mean
        # inputs keep randomly initialized conv features from collapsing
        # onto one shared positive direction, which would flatten the
        # cosine landscape at the start of training.
        radius = 2
        side = 2 * radius + 1
        palette = rng.uniform(-1.0, 1.0, size=(n, 3, side, side))
        imgs = []
        for px in (src_px, tgt_px):
            img = np.zeros((3, h, w), dtype=np.float64)
            if spec.noise_sigma > 0:
                img += spec.noise_sigma * rng.standard_normal((3, h, w))
            for i, (x, y) in enumerate(px.astype(np.int64)):
                y0, y1 = max(y - radius, 0), min(y + radius + 1, h)
                x0, x1 = max(x - radius, 0), min(x + radius + 1, w)
                img[:, y0:y1, x0:x1] = palette[i][
                    :, y0 - (y - radius) : side - (y + radius + 1 - y1),
                    x0 - (x - radius) : side - (x + radius + 1 - x1),
                ]
            imgs.append(Tensor(np.clip(img, -1.0, 1.0).astype(np.float32)))
        return imgs[0], imgs[1], ann

    c = spec.descriptor_dim
    descriptors = rng.standard_normal((n, c))
    h4, w4 = h // 4, w // 4
    maps = {}
    for name, cells in (("src", src_cells), ("tgt", tgt_cells)):
        grid = _background_map(rng, spec, descriptors, (h4, w4))
        grid[cells[:, 1], cells[:, 0]] = descriptors
        if spec.noise_sigma > 0:
            grid = grid + spec.noise_sigma * rng.standard_normal(grid.shape)
        maps[name] = grid

    if spec.noise_sigma > 0:
        # Noise may not break the planted argmax at stride 4.
        unit = descriptors / np.linalg.norm(descriptors, axis=1, keepdims=True)
        tgt_flat = maps["tgt"].reshape(-1, c)
        cos = (tgt_flat / np.linalg.norm(tgt_flat, axis=1, keepdims=True)) @ unit.T
        planted = tgt_cells[:, 1] * w4 + tgt_cells[:, 0]
        if not (cos.argmax(axis=0) == planted).all():
            raise InputError(
                f"noise_sigma {spec.noise_sigma} destroys planted nearest neighbors"
            )

    pyramids = []
    for name in ("src", "tgt"):
        m4 = maps[name]
        m8 = _pool2(m4)
        m16 = _pool2(m8)
        pyramids.append(
            FeaturePyramid(
                {
                    4: Tensor(np.ascontiguousarray(m4.transpose(2, 0, 1))),
                    8: Tensor(np.ascontiguousarray(m8.transpose(2, 0, 1))),
                    16: Tensor(np.ascontiguousarray(m16.transpose(2, 0, 1))),
                },
                (h, w),
            )
        )
    return pyramids[0], pyramids[1], ann


def generate_dataset(base_seed: int, count: int, template: SyntheticSpec,
                     output: str = "images"):
    """A list of pairs with per-pair seeds derived from `base_seed`."""
    out = []
    for i in range(count):
        spec = SyntheticSpec(
            seed=base_seed + i,
            image_size=template.image_size,
            n_keypoints=template.n_keypoints,
            collision_rate=template.collision_rate,
            descriptor_dim=template.descriptor_dim,
            noise_sigma=template.noise_sigma,
        )
        out.append(generate_pair(spec, output=output))
    return out
