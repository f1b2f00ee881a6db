"""Encoder and lightweight upsampling decoder.

The encoder is a compact 4-stage convolutional backbone (stride 2 per
stage, so the deepest feature sits at stride 16). The decoder projects the
stride-16 feature to a uniform width and applies two upsampling modules,
each of which sums a learned branch (transposed convolution, or a 1x1
projection of an encoder skip feature) with bilinear interpolation of the
deep feature, then refines the sum with a residual block of two 3x3
convolutions. The result is a feature pyramid at strides 16, 8 and 4.

Checkpoints use the "SMCK" binary format documented in `save_checkpoint`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, FormatError

CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    in_channels: int = 3
    # Output channels of the four stride-2 stages (strides 2, 4, 8, 16).
    stage_channels: tuple = (64, 128, 256, 512)
    # Extra stride-1 refinement convolutions per stage.
    convs_per_stage: int = 3
    seed: int = 0

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ContractError("encoder needs exactly 4 stages")
        if any(c < 1 for c in self.stage_channels):
            raise ContractError("stage channel counts must be >= 1")
        if self.convs_per_stage < 1:
            raise ContractError("each stage needs at least its stride-2 conv")


@dataclass
class DecoderConfig:
    width: int = 64
    use_skip: bool = False
    scales: tuple = (16, 8, 4)
    seed: int = 0

    def __post_init__(self):
        if tuple(sorted(self.scales, reverse=True)) != (16, 8, 4):
            raise ContractError(f"decoder produces strides 16/8/4, got {self.scales}")
        if self.width < 1:
            raise ContractError("decoder width must be >= 1")


@dataclass
class FeaturePyramid:
    """Feature maps keyed by stride, all sharing one channel count."""

    by_stride: dict
    input_size: tuple

    def __post_init__(self):
        h, w = self.input_size
        for stride, feat in self.by_stride.items():
            expect = (h // stride, w // stride)
            got = feat.shape[1:]
            if got != expect:
                raise DimensionError(
                    f"stride-{stride} map is {got}, expected {expect} for input {self.input_size}"
                )

    def __getitem__(self, stride: int) -> Tensor:
        return self.by_stride[stride]

    @property
    def strides(self):
        return tuple(sorted(self.by_stride, reverse=True))


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_param(rng, c_out, c_in, k, dtype):
    return _uniform_fan_in(rng, (c_out, c_in, k, k), c_in * k * k, dtype)


class CorrespondenceModel:
    """Encoder + decoder with a flat, ordered parameter dictionary."""

    def __init__(self, encoder: EncoderConfig | None = None,
                 decoder: DecoderConfig | None = None, dtype=np.float32):
        self.encoder_cfg = encoder or EncoderConfig()
        self.decoder_cfg = decoder or DecoderConfig()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._init_params()

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, value: np.ndarray):
        self.params[name] = Tensor(value, requires_grad=True)

    def _init_params(self):
        enc, dec = self.encoder_cfg, self.decoder_cfg
        rng = np.random.Generator(np.random.PCG64(enc.seed))
        c_prev = enc.in_channels
        for i, c in enumerate(enc.stage_channels, start=1):
            self._add(f"enc.stage{i}.conv0.w", _conv_param(rng, c, c_prev, 3, self.dtype))
            self._add(f"enc.stage{i}.conv0.b", np.zeros(c, self.dtype))
            for j in range(1, enc.convs_per_stage):
                self._add(f"enc.stage{i}.conv{j}.w", _conv_param(rng, c, c, 3, self.dtype))
                self._add(f"enc.stage{i}.conv{j}.b", np.zeros(c, self.dtype))
            c_prev = c

        rng = np.random.Generator(np.random.PCG64(dec.seed))
        cw = dec.width
        c16 = enc.stage_channels[3]
        self._add("dec.proj16.w", _conv_param(rng, cw, c16, 1, self.dtype))
        self._add("dec.proj16.b", np.zeros(cw, self.dtype))
        # Skip sources: stage 3 (stride 8) feeds the first module, stage 2
        # (stride 4) the second.
        for name, c_skip in (("up8", enc.stage_channels[2]), ("up4", enc.stage_channels[1])):
            if dec.use_skip:
                self._add(f"dec.{name}.skip.w", _conv_param(rng, cw, c_skip, 1, self.dtype))
                self._add(f"dec.{name}.skip.b", np.zeros(cw, self.dtype))
            else:
                # Transposed conv weight layout is (C_in, C_out, kh, kw).
                self._add(
                    f"dec.{name}.tconv.w",
                    _uniform_fan_in(rng, (cw, cw, 4, 4), cw * 16, self.dtype),
                )
                self._add(f"dec.{name}.tconv.b", np.zeros(cw, self.dtype))
            for conv in ("conv1", "conv2"):
                self._add(f"dec.{name}.block.{conv}.w", _conv_param(rng, cw, cw, 3, self.dtype))
                self._add(f"dec.{name}.block.{conv}.b", np.zeros(cw, self.dtype))

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def encoder_param_count(self) -> int:
        return sum(p.size for n, p in self.params.items() if n.startswith("enc."))

    def decoder_param_count(self) -> int:
        return sum(p.size for n, p in self.params.items() if n.startswith("dec."))

    # -- forward ------------------------------------------------------------

    def encode(self, image: Tensor) -> dict[int, Tensor]:
        """Run the backbone; returns features keyed by stride (2, 4, 8, 16)."""
        c, h, w = image.shape
        if c != self.encoder_cfg.in_channels:
            raise DimensionError(
                f"encode: image has {c} channels, config expects {self.encoder_cfg.in_channels}"
            )
        if h % 16 or w % 16:
            raise ContractError(f"encode: input dims must be divisible by 16, got {h}x{w}")
        feats = {}
        x = image
        for i in range(1, 5):
            x = ad.conv2d(x, self.params[f"enc.stage{i}.conv0.w"], stride=2, padding=1)
            x = ad.relu(ad.add_channel_bias(x, self.params[f"enc.stage{i}.conv0.b"]))
            for j in range(1, self.encoder_cfg.convs_per_stage):
                x = ad.conv2d(x, self.params[f"enc.stage{i}.conv{j}.w"], stride=1, padding=1)
                x = ad.relu(ad.add_channel_bias(x, self.params[f"enc.stage{i}.conv{j}.b"]))
            feats[2 ** i] = x
        return feats

    def _conv_block(self, x: Tensor, prefix: str) -> Tensor:
        return conv_block(
            x,
            self.params[f"{prefix}.conv1.w"], self.params[f"{prefix}.conv1.b"],
            self.params[f"{prefix}.conv2.w"], self.params[f"{prefix}.conv2.b"],
        )

    def _upsample(self, deep: Tensor, skip: Tensor | None, name: str) -> Tensor:
        if self.decoder_cfg.use_skip:
            branch = (self.params[f"dec.{name}.skip.w"], self.params[f"dec.{name}.skip.b"])
        else:
            branch = (self.params[f"dec.{name}.tconv.w"], self.params[f"dec.{name}.tconv.b"])
        return upsample_module(
            deep, skip, branch,
            (self.params[f"dec.{name}.block.conv1.w"], self.params[f"dec.{name}.block.conv1.b"],
             self.params[f"dec.{name}.block.conv2.w"], self.params[f"dec.{name}.block.conv2.b"]),
            use_skip=self.decoder_cfg.use_skip,
        )

    def decode(self, encoder_features: dict[int, Tensor], input_size: tuple) -> FeaturePyramid:
        """Build the stride-16/8/4 pyramid from encoder features."""
        if 16 not in encoder_features:
            raise ContractError("decode: stride-16 encoder feature is required")
        if self.decoder_cfg.use_skip and not (4 in encoder_features and 8 in encoder_features):
            raise ContractError("decode: use_skip requires stride-8 and stride-4 features")
        deep = ad.conv2d(encoder_features[16], self.params["dec.proj16.w"])
        deep = ad.add_channel_bias(deep, self.params["dec.proj16.b"])
        f16 = deep
        f8 = self._upsample(f16, encoder_features.get(8), "up8")
        f4 = self._upsample(f8, encoder_features.get(4), "up4")
        return FeaturePyramid({16: f16, 8: f8, 4: f4}, input_size)

    def forward(self, image: Tensor) -> FeaturePyramid:
        return self.decode(self.encode(image), image.shape[1:])

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        save_checkpoint(path, self.params)

    def load(self, path):
        loaded = load_checkpoint(path)
        if set(loaded) != set(self.params):
            missing = set(self.params) ^ set(loaded)
            raise FormatError(f"checkpoint parameter names do not match model: {sorted(missing)[:4]}")
        for name, arr in loaded.items():
            if arr.shape != self.params[name].shape:
                raise FormatError(
                    f"checkpoint shape mismatch for {name}: "
                    f"{arr.shape} vs {self.params[name].shape}"
                )
            self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True)


def conv_block(x: Tensor, w1, b1, w2, b2) -> Tensor:
    """Residual refinement: x + conv3x3(relu(conv3x3(x))); shape preserved."""
    y = ad.conv2d(x, w1, stride=1, padding=1)
    y = ad.relu(ad.add_channel_bias(y, b1))
    y = ad.conv2d(y, w2, stride=1, padding=1)
    y = ad.add_channel_bias(y, b2)
    return ad.add(x, y)


def upsample_module(deep: Tensor, skip: Tensor | None, branch_params, block_params,
                    use_skip: bool) -> Tensor:
    """Double the spatial size of `deep`.

    Fuses a learned branch with bilinear interpolation by summation, then
    refines with a residual conv block. The learned branch is a stride-2
    transposed convolution of `deep`, or a 1x1 projection of the encoder
    `skip` feature when `use_skip` is set.
    """
    c, h, w = deep.shape
    up = ad.bilinear_resize(deep, 2 * h, 2 * w)
    if use_skip:
        if skip is None:
            raise ContractError("upsample_module: use_skip requires a skip feature")
        if skip.shape[1:] != (2 * h, 2 * w):
            raise DimensionError(
                f"upsample_module: skip is {skip.shape[1:]}, expected {(2 * h, 2 * w)}"
            )
        sw, sb = branch_params
        learned = ad.add_channel_bias(ad.conv2d(skip, sw), sb)
    else:
        tw, tb = branch_params
        learned = ad.add_channel_bias(
            ad.transposed_conv2d(deep, tw, stride=2, padding=1), tb
        )
    fused = ad.add(learned, up)
    w1, b1, w2, b2 = block_params
    return conv_block(fused, w1, b1, w2, b2)


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor]):
    """Write parameters as SMCK: magic, u32 version, then per-tensor records.

    Record layout (little-endian): u16 name length, name bytes (utf-8),
    u8 ndim, ndim x u64 dims, raw float32 data.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, tensor in params.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(tensor.data, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}", offset=fh.tell())
    return buf


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read an SMCK file back into name -> float32 array."""
    params = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FormatError("truncated record header", offset=fh.tell())
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, "record name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, "dims"))
            count = int(np.prod(dims)) if ndim else 1
            raw = _read_exact(fh, 4 * count, f"data of {name}")
            params[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return params
