"""Dense tensors with reverse-mode differentiation.

A small numpy-backed engine: just enough operations for a convolutional
encoder/decoder, cosine-similarity matching and coordinate losses.

Values are immutable once wrapped in a :class:`Tensor`; every operation
returns a fresh tensor. Differentiation is recorded on a global
:class:`TapeScope` that can be paused for inference-only work. The scope
also counts the elements of every recorded intermediate, grouped by a
caller-chosen phase label; this count is the memory proxy used by the
benchmark module. Backward closures recompute their temporaries from the
saved parent tensors instead of stashing extra buffers, so the element
count is an honest proxy for what the tape retains.

Determinism: all reductions either run through numpy's fixed pairwise
summation, `np.add.at` (sequential) or the process BLAS. Repeated calls in
one process are bitwise identical; reruns on the same machine with the
same library configuration reproduce results byte for byte.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NumericError

FLOAT_DTYPES = (np.float32, np.float64)

# Score assigned to masked similarity cells; exp(MASK_SCORE / tau)
# underflows to exactly 0.0 for any reasonable temperature.
MASK_SCORE = -1e9


class TapeScope:
    """Recording switch plus a per-phase count of recorded elements."""

    def __init__(self):
        self.recording = True
        self.phase_counts: dict[str, int] = {}
        self._phase = "default"

    @property
    def element_count(self) -> int:
        return sum(self.phase_counts.values())

    def reset(self):
        self.phase_counts = {}
        self._phase = "default"

    def _bump(self, n: int):
        self.phase_counts[self._phase] = self.phase_counts.get(self._phase, 0) + n

    @contextmanager
    def paused(self):
        prev = self.recording
        self.recording = False
        try:
            yield self
        finally:
            self.recording = prev

    @contextmanager
    def phase(self, label: str):
        prev = self._phase
        self._phase = label
        try:
            yield self
        finally:
            self._phase = prev


#: Process-wide tape. Confined to the single training thread by convention.
TAPE = TapeScope()


def no_grad():
    """Context manager that disables recording on the global tape."""
    return TAPE.paused()


class Tensor:
    """Row-major dense array, optionally recorded on the tape.

    `data` is a read-only, C-contiguous float32/float64 numpy array.
    Recorded tensors keep their parents and a backward closure; leaves
    created with ``requires_grad=True`` receive a `grad` after backward().
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None
        self.parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = self.op or ("leaf" if self.requires_grad else "const")
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, {tag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return _wrap(self.data.copy())

    # Arithmetic sugar for same-shape operands.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def _wrap(arr: np.ndarray) -> Tensor:
    """Wrap a freshly allocated array without copying (internal use)."""
    out = Tensor.__new__(Tensor)
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    out.data = arr
    out.grad = None
    out.requires_grad = False
    out.op = None
    out.parents = ()
    out._backward = None
    return out


def _from_op(arr, parents, backward_fn, op_name, recorded_elements=None):
    """Build an op output, recording it when the tape is live.

    `recorded_elements` overrides the element count charged to the tape;
    view ops pass 0, ragged ops pass their actual payload size.
    """
    out = _wrap(np.asarray(arr))
    if TAPE.recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op_name
        out.parents = tuple(parents)
        out._backward = backward_fn
        TAPE._bump(out.data.size if recorded_elements is None else recorded_elements)
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad = t.grad + g


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_shape(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_shape(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_shape(a, b, "mul")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _from_op(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _from_op(a.data * a.data.dtype.type(c), (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * (a.data > 0))

    return _from_op(np.maximum(a.data, 0), (a,), backward, "relu")


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def backward(g):
        # Subgradient 0 at exactly zero; keeps coincident-point losses finite.
        _accum(a, np.where(y > 0, 0.5 * g / np.where(y > 0, y, 1.0), 0.0))

    return _from_op(y, (a,), backward, "sqrt")


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.full_like(a.data, g.reshape(())))

    return _from_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    # A view in any real tensor library: charges nothing to the tape.
    return _from_op(a.data.reshape(shape), (a,), backward, "reshape", recorded_elements=0)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose2d: need 2-d tensor, got {a.data.shape}")

    def backward(g):
        _accum(a, np.ascontiguousarray(g.T))

    return _from_op(a.data.T, (a,), backward, "transpose", recorded_elements=0)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(
            f"concat_cols: incompatible shapes {a.data.shape} vs {b.data.shape}"
        )
    na = a.data.shape[1]

    def backward(g):
        _accum(a, g[:, :na])
        _accum(b, g[:, na:])

    return _from_op(np.concatenate([a.data, b.data], axis=1), (a, b), backward, "concat")


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 3 or bias.data.shape != (x.data.shape[0],):
        raise DimensionError(
            f"add_channel_bias: got x {x.data.shape}, bias {bias.data.shape}"
        )

    def backward(g):
        _accum(x, g)
        _accum(bias, g.sum(axis=(1, 2)))

    return _from_op(x.data + bias.data[:, None, None], (x, bias), backward, "bias")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul: need 2-d operands, got {a.data.shape}, {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner dims differ: {a.data.shape} @ {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"matmul: dtype mismatch {a.data.dtype} vs {b.data.dtype}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _from_op(a.data @ b.data, (a, b), backward, "matmul")


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-d tensor; duplicate indices accumulate gradient."""
    if x.data.ndim != 2:
        raise DimensionError(f"gather_rows: need 2-d tensor, got {x.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows: need 1-d index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise DimensionError("gather_rows: index out of range")

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accum(x, gx)

    return _from_op(x.data[idx], (x,), backward, "gather_rows")


def scatter_flat(values: Tensor, positions, shape, fill_value: float) -> Tensor:
    """Place a flat vector of values into a dense tensor of `shape`.

    Positions index the flattened output and must be unique. Cells not
    covered receive `fill_value` and no gradient.
    """
    pos = np.asarray(positions, dtype=np.int64)
    if values.data.ndim != 1 or pos.shape != values.data.shape:
        raise DimensionError(
            f"scatter_flat: values {values.data.shape} vs positions {pos.shape}"
        )
    out = np.full(shape, fill_value, dtype=values.dtype)
    out.reshape(-1)[pos] = values.data

    def backward(g):
        _accum(values, g.reshape(-1)[pos])

    return _from_op(out, (values,), backward, "scatter")


def gather_window(x: Tensor, indices, valid_mask) -> Tensor:
    """Per-row gather: out[i, j] = x[i, indices[i, j]], masked cells -> MASK_SCORE."""
    if x.data.ndim != 2:
        raise DimensionError(f"gather_window: need 2-d tensor, got {x.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    mask = np.asarray(valid_mask, dtype=bool)
    if idx.shape != mask.shape or idx.ndim != 2 or idx.shape[0] != x.data.shape[0]:
        raise DimensionError("gather_window: indices/mask shape mismatch")
    safe = np.where(mask, idx, 0)
    rows = np.arange(idx.shape[0])[:, None]
    out = np.where(mask, x.data[rows, safe], x.dtype.type(MASK_SCORE))

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (np.broadcast_to(rows, idx.shape)[mask], safe[mask]), g[mask])
            _accum(x, gx)

    return _from_op(out, (x,), backward, "gather_window")


# ---------------------------------------------------------------------------
# Softmax
# ---------------------------------------------------------------------------


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax of ``x / temperature`` over the last axis.

    Max-shifted and accumulated in float64 for stability; output sums to 1
    per row within 1e-6 in either dtype. 1-d input is treated as one row.
    """
    if temperature <= 0:
        raise ContractError(f"softmax: temperature must be positive, got {temperature}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax: non-finite input")
    z = x.data.astype(np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p64 = e / e.sum(axis=-1, keepdims=True)
    p = p64.astype(x.dtype)

    def backward(g):
        gp = g.astype(np.float64) * p64
        gx = (gp - p64 * gp.sum(axis=-1, keepdims=True)) / temperature
        _accum(x, gx.astype(x.dtype))

    return _from_op(p, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# Cosine similarity (fused: records only the scores)
# ---------------------------------------------------------------------------


def _normalize_rows(x: np.ndarray):
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    safe = np.where(norms == 0.0, 1.0, norms)
    return (x / safe.astype(x.dtype)), safe, norms == 0.0


def _normalization_vjp(x, x_hat, safe, zero, g_hat):
    """Pull a gradient on normalized rows back through row normalization."""
    inner = (g_hat * x_hat).sum(axis=1, keepdims=True)
    g = (g_hat - x_hat * inner) / safe.astype(x.dtype)
    g[zero[:, 0]] = 0.0
    return g


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of every row of `a` against every row of `b`.

    Fused: the tape records only the (n, m) score matrix; normalized rows
    are recomputed during backward. Zero-norm rows score 0 everywhere and
    receive zero gradient.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"cosine_rows: incompatible {a.data.shape}, {b.data.shape}")
    a_hat, _, _ = _normalize_rows(a.data)
    b_hat, _, _ = _normalize_rows(b.data)
    scores = a_hat @ b_hat.T

    def backward(g):
        an, sa, za = _normalize_rows(a.data)
        bn, sb, zb = _normalize_rows(b.data)
        if a.requires_grad:
            _accum(a, _normalization_vjp(a.data, an, sa, za, g @ bn))
        if b.requires_grad:
            _accum(b, _normalization_vjp(b.data, bn, sb, zb, g.T @ an))

    return _from_op(scores, (a, b), backward, "cosine_rows")


def cosine_pairs(a: Tensor, b: Tensor, a_indices, b_indices) -> Tensor:
    """Cosine similarity for explicit (row of a, row of b) pairs.

    Returns a flat vector of length L = len(a_indices); this is the ragged
    form used to recompute window scores, so the tape is charged exactly L
    elements.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"cosine_pairs: incompatible {a.data.shape}, {b.data.shape}")
    ia = np.asarray(a_indices, dtype=np.int64)
    ib = np.asarray(b_indices, dtype=np.int64)
    if ia.shape != ib.shape or ia.ndim != 1:
        raise DimensionError("cosine_pairs: index vectors must be equal-length 1-d")
    a_hat, _, _ = _normalize_rows(a.data)
    b_hat, _, _ = _normalize_rows(b.data)
    scores = (a_hat[ia] * b_hat[ib]).sum(axis=1)

    def backward(g):
        an, sa, za = _normalize_rows(a.data)
        bn, sb, zb = _normalize_rows(b.data)
        if a.requires_grad:
            g_hat = np.zeros_like(a.data)
            np.add.at(g_hat, ia, g[:, None] * bn[ib])
            _accum(a, _normalization_vjp(a.data, an, sa, za, g_hat))
        if b.requires_grad:
            g_hat = np.zeros_like(b.data)
            np.add.at(g_hat, ib, g[:, None] * an[ia])
            _accum(b, _normalization_vjp(b.data, bn, sb, zb, g_hat))

    return _from_op(scores, (a, b), backward, "cosine_pairs")


# ---------------------------------------------------------------------------
# Convolutions and resampling
# ---------------------------------------------------------------------------


def _conv_out_dim(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh, kw, stride, padding):
    c, h, w = x.shape
    ho = _conv_out_dim(h, kh, stride, padding)
    wo = _conv_out_dim(w, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, ho, wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xp[:, u : u + ho * stride : stride, v : v + wo * stride : stride]
    return cols.reshape(c * kh * kw, ho * wo), ho, wo


def _col2im(gcols: np.ndarray, c, h, w, kh, kw, stride, padding, ho, wo):
    gxp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    gc = gcols.reshape(c, kh, kw, ho, wo)
    for u in range(kh):
        for v in range(kw):
            gxp[:, u : u + ho * stride : stride, v : v + wo * stride : stride] += gc[:, u, v]
    if padding:
        return np.ascontiguousarray(gxp[:, padding : padding + h, padding : padding + w])
    return gxp


def _check_conv_args(stride, padding):
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ContractError(f"padding must be >= 0, got {padding}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (C_in,H,W) with (C_out,C_in,kh,kw)."""
    _check_conv_args(stride, padding)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: got x {x.data.shape}, kernel {kernel.data.shape}")
    c_out, c_in, kh, kw = kernel.data.shape
    if x.data.shape[0] != c_in:
        raise DimensionError(
            f"conv2d: input has {x.data.shape[0]} channels, kernel expects {c_in}"
        )
    c, h, w = x.data.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    out = (kernel.data.reshape(c_out, -1) @ cols).reshape(c_out, ho, wo)

    def backward(g):
        g_mat = g.reshape(c_out, ho * wo)
        if kernel.requires_grad:
            cols_b, _, _ = _im2col(x.data, kh, kw, stride, padding)
            _accum(kernel, (g_mat @ cols_b.T).reshape(kernel.data.shape))
        if x.requires_grad:
            gcols = kernel.data.reshape(c_out, -1).T @ g_mat
            _accum(x, _col2im(gcols, c, h, w, kh, kw, stride, padding, ho, wo))

    return _from_op(out, (x, kernel), backward, "conv2d")


def _tconv_raw(x: np.ndarray, kernel: np.ndarray, stride, padding):
    c_in, h, w = x.shape
    _, c_out, kh, kw = kernel.shape
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    outp = np.zeros((c_out, hf, wf), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            outp[:, u : u + (h - 1) * stride + 1 : stride,
                 v : v + (w - 1) * stride + 1 : stride] += np.einsum(
                "io,ihw->ohw", kernel[:, :, u, v], x
            )
    if padding:
        outp = np.ascontiguousarray(outp[:, padding : hf - padding, padding : wf - padding])
    return outp


def transposed_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Scatter (gradient-of-conv) upsampling of (C_in,H,W) with (C_in,C_out,kh,kw)."""
    _check_conv_args(stride, padding)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(
            f"transposed_conv2d: got x {x.data.shape}, kernel {kernel.data.shape}"
        )
    c_in, c_out, kh, kw = kernel.data.shape
    if x.data.shape[0] != c_in:
        raise DimensionError(
            f"transposed_conv2d: input has {x.data.shape[0]} channels, kernel expects {c_in}"
        )
    _, h, w = x.data.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise DimensionError(f"transposed_conv2d: output would be {ho}x{wo}")
    out = _tconv_raw(x.data, kernel.data, stride, padding)

    def backward(g):
        if x.requires_grad:
            # Adjoint of the scatter is the plain convolution with the same
            # kernel array read as (C_out_conv=C_in, C_in_conv=C_out, kh, kw).
            cols, ho2, wo2 = _im2col(g, kh, kw, stride, padding)
            gx = (kernel.data.reshape(c_in, -1) @ cols).reshape(c_in, ho2, wo2)
            _accum(x, gx)
        if kernel.requires_grad:
            gp = np.pad(g, ((0, 0), (padding, padding), (padding, padding)))
            gk = np.empty_like(kernel.data)
            for u in range(kh):
                for v in range(kw):
                    sl = gp[:, u : u + (h - 1) * stride + 1 : stride,
                            v : v + (w - 1) * stride + 1 : stride]
                    gk[:, :, u, v] = np.einsum("ihw,ohw->io", x.data, sl)
            _accum(kernel, gk)

    return _from_op(out, (x, kernel), backward, "transposed_conv2d")


def _bilinear_weights(in_size: int, out_size: int):
    """Sampling positions for align_corners=False interpolation."""
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, in_size - 1)
    i1c = np.clip(i0 + 1, 0, in_size - 1)
    return i0c, i1c, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling (align_corners=False) of a (C,H,W) tensor."""
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_resize: need (C,H,W), got {x.data.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: bad output size {out_h}x{out_w}")
    _, h, w = x.data.shape
    y0, y1, fy = _bilinear_weights(h, out_h)
    x0, x1, fx = _bilinear_weights(w, out_w)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]
    d = x.data
    out = (
        (wy0 * wx0) * d[:, y0[:, None], x0[None, :]]
        + (wy0 * wx1) * d[:, y0[:, None], x1[None, :]]
        + (wy1 * wx0) * d[:, y1[:, None], x0[None, :]]
        + (wy1 * wx1) * d[:, y1[:, None], x1[None, :]]
    ).astype(x.dtype)

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        yy0 = np.broadcast_to(y0[:, None], (out_h, out_w))
        yy1 = np.broadcast_to(y1[:, None], (out_h, out_w))
        xx0 = np.broadcast_to(x0[None, :], (out_h, out_w))
        xx1 = np.broadcast_to(x1[None, :], (out_h, out_w))
        for wgt, iy, ix in (
            (wy0 * wx0, yy0, xx0),
            (wy0 * wx1, yy0, xx1),
            (wy1 * wx0, yy1, xx0),
            (wy1 * wx1, yy1, xx1),
        ):
            np.add.at(gx, (slice(None), iy, ix), (wgt * g).astype(x.dtype))
        _accum(x, gx)

    return _from_op(out, (x,), backward, "bilinear_resize")


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(root: Tensor):
    """Reverse-mode sweep from a scalar root; fills `grad` on reachable nodes."""
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        raise ContractError(
            "backward: root is not recorded on the tape "
            "(was it computed with recording disabled?)"
        )
    order = []
    visited = {id(root)}
    stack = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in visited and parent.requires_grad:
                visited.add(id(parent))
                stack.append((parent, iter(parent.parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _numeric_gradient(f, x: Tensor, h: float) -> np.ndarray:
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with TAPE.paused():
        for i in range(flat.size):
            plus = flat.copy()
            plus[i] += h
            minus = flat.copy()
            minus[i] -= h
            fp = f(Tensor(plus.reshape(x.data.shape), dtype=np.float64)).item()
            fm = f(Tensor(minus.reshape(x.data.shape), dtype=np.float64)).item()
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    return numeric


def _analytic_gradient(f, x: Tensor) -> np.ndarray:
    leaf = Tensor(x.data, requires_grad=True, dtype=np.float64)
    out = f(leaf)
    if out.requires_grad:
        backward(out)
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)


def _relative_errors(analytic, numeric) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor. Requires float64 input; the
    numeric probe perturbs every element, so keep `x` small.
    """
    if x.dtype != np.float64:
        raise ContractError("grad_check requires a float64 tensor")
    analytic = _analytic_gradient(f, x)
    if x.data.size == 0:
        return 0.0
    return float(_relative_errors(analytic, _numeric_gradient(f, x, h)).max())


def grad_check_multi(f, x: Tensor, steps=(1e-5, 3e-4)) -> float:
    """grad_check at several step sizes, keeping each element's best step.

    Central differences trade truncation error (shrinks with h) against
    round-off noise (grows as 1/h); elements whose true gradient is near
    zero sit below the noise floor of any single step, so long chains are
    checked per element at the step that resolves it.
    """
    if x.dtype != np.float64:
        raise ContractError("grad_check requires a float64 tensor")
    analytic = _analytic_gradient(f, x)
    if x.data.size == 0:
        return 0.0
    best = None
    for h in steps:
        rel = _relative_errors(analytic, _numeric_gradient(f, x, h))
        best = rel if best is None else np.minimum(best, rel)
    return float(best.max())
