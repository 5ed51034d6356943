"""Microscaling block quantization with preserved outliers (MX-OPAL).

A block of k values shares one power-of-two scale. The plain microscaling
integer baseline (MXINT) sets that scale from the block's maximum exponent;
the outlier-preserving variant stores the n largest-magnitude elements as
bfloat16 side data and takes the scale from the (n+1)-th highest exponent
instead, so the integer step tracks the bulk of the distribution rather
than the outliers.

Encoding conventions:

  * Inputs are treated as bfloat16 (the accelerator's activation type):
    every quantizer first rounds its input block to bfloat16, and shared
    exponents are extracted from the rounded values.
  * Codes are sign-magnitude symmetric in [-(2^(b-1)-1), 2^(b-1)-1] with
    non-outlier value = code * 2^(shared_exp - b + 2), so the scale-setting
    element lands exactly on code 2^(b-2).
  * Tensors store one global exponent (the minimum block exponent) plus a
    4-bit unsigned offset per block; offsets saturate at 15 and saturated
    blocks requantize against global + 15 (their codes clamp).
  * Zero blocks use the sentinel exponent -126 (minimum normal bfloat16
    exponent) so their codes stay 0 and dequantize to exact zero.

Serialized form (little-endian), magic "OPQT":

    magic "OPQT" | k u16 | n u16 | b u16 | global_exp i16 | ndim u8 |
    dims u64 * ndim | per block: offset u8 (low 4 bits),
    codes packed b bits each LSB-first (two's complement),
    n outliers each (index u8, bfloat16 bits u16)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .bf16 import (
    BF16_MIN_EXP,
    bf16_bits_to_f32,
    f32_to_bf16_bits,
    unbiased_exponent,
)
from .errors import (
    BadMagicError,
    ConfigError,
    TensorFormatError,
    TruncatedPayloadError,
)
from .tensorio import Tensor

QUANT_MAGIC = b"OPQT"
OFFSET_BITS = 4
_MAX_OFFSET = (1 << OFFSET_BITS) - 1

ROUND_HALF_AWAY = "half-away"
ROUND_HALF_EVEN = "half-even"


@dataclass(frozen=True)
class QuantConfig:
    """Block-quantization parameters: block size k, preserved outliers n,
    sign+mantissa bits b of the non-outlier codes."""

    b: int
    k: int = 128
    n: int = 4
    offset_bits: int = OFFSET_BITS
    rounding: str = ROUND_HALF_AWAY

    def __post_init__(self):
        if self.k <= 0:
            raise ConfigError("block size k must be positive")
        if not 0 <= self.n < self.k:
            raise ConfigError("outlier count n must satisfy 0 <= n < k")
        if self.b < 2:
            raise ConfigError("code bit-width b must be at least 2")
        if self.offset_bits != OFFSET_BITS:
            raise ConfigError("block offsets are fixed at 4 bits")
        if self.rounding not in (ROUND_HALF_AWAY, ROUND_HALF_EVEN):
            raise ConfigError(f"unknown rounding mode {self.rounding!r}")

    @property
    def code_max(self) -> int:
        return (1 << (self.b - 1)) - 1


def _round_codes(x: np.ndarray, mode: str) -> np.ndarray:
    if mode == ROUND_HALF_AWAY:
        return np.copysign(np.floor(np.abs(x) + 0.5), x)
    return np.rint(x)


def _ingest(values) -> np.ndarray:
    """Round a block to bfloat16 (float32-valued) and validate finiteness."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 1:
        raise ConfigError("a block must be a 1-D sequence")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("block contains NaN or infinity")
    return bf16_bits_to_f32(f32_to_bf16_bits(arr))


@dataclass(frozen=True)
class MxBlock:
    """One quantized block: integer codes, the shared exponent, and the
    preserved outliers as (index, bfloat16 bits) pairs. Outlier positions
    hold code 0."""

    codes: np.ndarray
    shared_exp: int
    outlier_idx: np.ndarray
    outlier_bits: np.ndarray
    bits: int

    @property
    def k(self) -> int:
        return int(self.codes.size)

    @property
    def step(self) -> float:
        return math.ldexp(1.0, self.shared_exp - self.bits + 2)

    def outlier_values(self) -> np.ndarray:
        return bf16_bits_to_f32(self.outlier_bits)

    def dequantize(self) -> np.ndarray:
        out = np.ldexp(
            self.codes.astype(np.float64), self.shared_exp - self.bits + 2
        ).astype(np.float32)
        if self.outlier_idx.size:
            out[self.outlier_idx] = self.outlier_values()
        return out


@dataclass(frozen=True)
class MinMaxBlock:
    """Affine per-block baseline: code in [0, 2^b - 1],
    value = code * scale + offset with scale = (max - min) / (2^b - 1)."""

    codes: np.ndarray
    scale: np.float32
    offset: np.float32
    bits: int

    def dequantize(self) -> np.ndarray:
        return (
            self.codes.astype(np.float64) * np.float64(self.scale) + np.float64(self.offset)
        ).astype(np.float32)


def extract_shared_scale(values, n: int) -> tuple[np.ndarray, int]:
    """Pick the n largest-magnitude elements as outliers (ties: lower index
    wins) and return their indices plus the unbiased exponent of the largest
    remaining element (-126 if all remaining are zero)."""
    x = _ingest(values)
    if n >= x.size:
        raise ConfigError("n must be smaller than the block size")
    order = np.argsort(-np.abs(x), axis=0, kind="stable")
    outlier_idx = order[:n].astype(np.int64)
    rest = order[n:]
    top_rest = np.abs(x[rest]).max() if rest.size else 0.0
    return outlier_idx, int(unbiased_exponent(np.float64(top_rest)))


def quantize_block_mxopal(values, cfg: QuantConfig, outlier_idx=None) -> MxBlock:
    """Quantize one block, preserving cfg.n top-magnitude outliers in
    bfloat16 (or exactly the given `outlier_idx` positions, e.g. weight
    columns forced to bfloat16)."""
    x = _ingest(values)
    if x.size != cfg.k:
        raise ConfigError(f"block length {x.size} != configured k {cfg.k}")
    if outlier_idx is None:
        outlier_idx, shared_exp = extract_shared_scale(x, cfg.n)
    else:
        outlier_idx = np.asarray(outlier_idx, dtype=np.int64)
        if outlier_idx.size and (
            outlier_idx.min() < 0
            or outlier_idx.max() >= cfg.k
            or np.unique(outlier_idx).size != outlier_idx.size
        ):
            raise ConfigError("outlier indices must be distinct and within the block")
        if outlier_idx.size >= cfg.k:
            raise ConfigError("cannot mark every element as an outlier")
        rest = np.setdiff1d(np.arange(cfg.k), outlier_idx)
        top_rest = np.abs(x[rest]).max() if rest.size else 0.0
        shared_exp = int(unbiased_exponent(np.float64(top_rest)))
    return _encode_block(x, shared_exp, outlier_idx, cfg)


def quantize_block_mxint(values, b: int) -> MxBlock:
    """Plain microscaling baseline: shared scale from the maximum exponent,
    no preserved outliers."""
    return quantize_block_mxopal(values, QuantConfig(b=b, k=len(values), n=0))


def _encode_block(x: np.ndarray, shared_exp: int, outlier_idx: np.ndarray, cfg: QuantConfig) -> MxBlock:
    step = math.ldexp(1.0, shared_exp - cfg.b + 2)
    q = _round_codes(x.astype(np.float64) / step, cfg.rounding)
    codes = np.clip(q, -cfg.code_max, cfg.code_max).astype(np.int32)
    outlier_bits = f32_to_bf16_bits(x[outlier_idx])
    if outlier_idx.size:
        codes[outlier_idx] = 0
    return MxBlock(
        codes=codes,
        shared_exp=int(shared_exp),
        outlier_idx=outlier_idx,
        outlier_bits=outlier_bits,
        bits=cfg.b,
    )


def quantize_block_minmax(values, b: int) -> MinMaxBlock:
    """Affine baseline: scale = (max - min) / (2^b - 1), codes rounded to
    the nearest level. A constant block gets scale 0 and all-zero codes."""
    x = _ingest(values)
    lo = np.float32(x.min())
    hi = np.float32(x.max())
    levels = (1 << b) - 1
    if hi == lo:
        return MinMaxBlock(
            codes=np.zeros(x.size, dtype=np.int64), scale=np.float32(0.0), offset=lo, bits=b
        )
    scale = np.float32((np.float64(hi) - np.float64(lo)) / levels)
    q = _round_codes((x.astype(np.float64) - np.float64(lo)) / np.float64(scale), ROUND_HALF_AWAY)
    codes = np.clip(q, 0, levels).astype(np.int64)
    return MinMaxBlock(codes=codes, scale=scale, offset=lo, bits=b)


@dataclass(frozen=True)
class QuantizedTensor:
    """A tensor encoded as rows of MX blocks plus one global exponent and a
    4-bit per-block offset reconstructing each block's shared exponent.

    Block arrays are (nblocks, ...) with blocks in row-major order over
    (row, column-block); the innermost dimension is zero-padded to a
    multiple of k and padding is stripped on dequantize.
    """

    config: QuantConfig
    dims: tuple[int, ...]
    global_exp: int
    offsets: np.ndarray
    codes: np.ndarray
    outlier_idx: np.ndarray
    outlier_bits: np.ndarray

    @property
    def nblocks(self) -> int:
        return int(self.codes.shape[0])

    @property
    def inner_dim(self) -> int:
        return int(self.dims[-1])

    @property
    def padded_inner(self) -> int:
        k = self.config.k
        return ((self.inner_dim + k - 1) // k) * k

    @property
    def blocks_per_row(self) -> int:
        return self.padded_inner // self.config.k

    @property
    def nrows(self) -> int:
        return math.prod(self.dims[:-1]) if len(self.dims) > 1 else 1

    def block_exp(self, i: int) -> int:
        return self.global_exp + int(self.offsets[i])

    def block(self, i: int) -> MxBlock:
        idx = self.outlier_idx[i]
        keep = idx >= 0
        return MxBlock(
            codes=self.codes[i],
            shared_exp=self.block_exp(i),
            outlier_idx=idx[keep].astype(np.int64),
            outlier_bits=self.outlier_bits[i][keep],
            bits=self.config.b,
        )

    def blocks_of_row(self, row: int) -> list[MxBlock]:
        start = row * self.blocks_per_row
        return [self.block(start + c) for c in range(self.blocks_per_row)]

    def dequantize(self) -> Tensor:
        return dequantize(self)


def _select_outliers(x: np.ndarray, n: int) -> np.ndarray:
    """Top-n magnitude indices per block row, ties broken by lower index."""
    order = np.argsort(-np.abs(x), axis=1, kind="stable")
    return order[:, :n].astype(np.int64)


def quantize_tensor(t: Tensor, cfg: QuantConfig, bf16_cols=None) -> QuantizedTensor:
    """Quantize a tensor block-wise along its innermost dimension.

    With bf16_cols given (sorted column indices of the innermost dimension),
    those columns are preserved in bfloat16 in every block instead of the
    per-block top-n selection; this is the magnitude-proxy weight path.
    Padding lanes are zero and never selected as outliers (zeros lose all
    magnitude ties).
    """
    k = cfg.k
    inner = t.dims[-1]
    nrows = math.prod(t.dims[:-1]) if len(t.dims) > 1 else 1
    padded = ((inner + k - 1) // k) * k
    x = bf16_bits_to_f32(f32_to_bf16_bits(t.data)).reshape(nrows, inner)
    if padded != inner:
        x = np.pad(x, ((0, 0), (0, padded - inner)))
    blocks = x.reshape(nrows * (padded // k), k)
    nb = blocks.shape[0]
    per_row = padded // k

    if bf16_cols is None:
        sel = _select_outliers(blocks, cfg.n)
        # Pack as a fixed-width (nb, n) index table.
        idx_table = sel
        n_slots = cfg.n
    else:
        cols = np.asarray(bf16_cols, dtype=np.int64)
        if cols.size and (cols.min() < 0 or cols.max() >= inner):
            raise ConfigError("bf16 column indices out of range")
        if np.unique(cols).size != cols.size:
            raise ConfigError("bf16 column indices must be distinct")
        per_block_cols = [np.sort(cols[(cols // k) == c] % k) for c in range(per_row)]
        n_slots = max((c.size for c in per_block_cols), default=0)
        if n_slots >= k:
            raise ConfigError("cannot mark every column of a block as bfloat16")
        idx_table = np.full((nb, n_slots), -1, dtype=np.int64)
        for c, cidx in enumerate(per_block_cols):
            idx_table[c::per_row, : cidx.size] = cidx

    mask = np.zeros((nb, k), dtype=bool)
    rows_idx = np.repeat(np.arange(nb), n_slots).reshape(nb, n_slots)
    valid = idx_table >= 0
    mask[rows_idx[valid], idx_table[valid]] = True

    bulk_abs = np.where(mask, 0.0, np.abs(blocks))
    block_exp = unbiased_exponent(bulk_abs.max(axis=1))
    global_exp = int(block_exp.min()) if nb else BF16_MIN_EXP
    offsets = np.minimum(block_exp - global_exp, _MAX_OFFSET).astype(np.uint8)
    eff_exp = global_exp + offsets.astype(np.int64)

    q = _round_codes(blocks.astype(np.float64) / np.exp2(eff_exp - cfg.b + 2.0)[:, None], cfg.rounding)
    codes = np.clip(q, -cfg.code_max, cfg.code_max).astype(np.int32)
    codes[mask] = 0

    bits_table = np.zeros((nb, n_slots), dtype=np.uint16)
    if n_slots:
        bits_table[valid] = f32_to_bf16_bits(blocks[rows_idx[valid], idx_table[valid]])

    return QuantizedTensor(
        config=cfg,
        dims=t.dims,
        global_exp=global_exp,
        offsets=offsets,
        codes=codes,
        outlier_idx=idx_table,
        outlier_bits=bits_table,
    )


def dequantize(q: QuantizedTensor) -> Tensor:
    """Invert the block encoding: codes scaled by 2^(exp - b + 2), outliers
    restored from their bfloat16 payloads, padding stripped."""
    eff_exp = q.global_exp + q.offsets.astype(np.int64)
    out = np.ldexp(q.codes.astype(np.float64), (eff_exp - q.config.b + 2)[:, None]).astype(
        np.float32
    )
    valid = q.outlier_idx >= 0
    if valid.any():
        rows = np.nonzero(valid)[0]
        cols = q.outlier_idx[valid]
        out[rows, cols] = bf16_bits_to_f32(q.outlier_bits[valid])
    flat = out.reshape(q.nrows, q.padded_inner)[:, : q.inner_dim]
    return Tensor(q.dims, flat.reshape(-1))


def memory_overhead_fraction(cfg: QuantConfig) -> Fraction:
    """Exact storage ratio of the outlier-preserving encoding versus plain
    MXINT: ((k - n) * b + 16 * n + 4) / (k * b + 8)."""
    return Fraction((cfg.k - cfg.n) * cfg.b + 16 * cfg.n + 4, cfg.k * cfg.b + 8)


def memory_overhead(cfg: QuantConfig) -> float:
    ratio = memory_overhead_fraction(cfg)
    return ratio.numerator / ratio.denominator


def block_bits(k: int, n: int, b: int) -> int:
    """Encoded size of one block in bits: codes + bfloat16 outliers + 4-bit offset."""
    return (k - n) * b + 16 * n + 4


def block_mse(original, dequantized) -> float:
    """Mean squared difference between two equal-length vectors."""
    a = np.asarray(original, dtype=np.float64).reshape(-1)
    b = np.asarray(dequantized, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ConfigError(f"length mismatch: {a.size} vs {b.size}")
    return float(np.mean((a - b) ** 2))


def select_bf16_columns(matrix: np.ndarray, fraction: float) -> np.ndarray:
    """Magnitude proxy for sensitive weight columns: the ceil(fraction *
    ncols) columns with the largest max-abs value, kept in bfloat16."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError("column fraction must lie in [0, 1)")
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ConfigError("weight matrix must be 2-D")
    count = math.ceil(fraction * m.shape[1])
    if count == 0:
        return np.empty(0, dtype=np.int64)
    strength = np.abs(m).max(axis=0)
    order = np.argsort(-strength, kind="stable")
    return np.sort(order[:count]).astype(np.int64)


def align_block_scales(q: QuantizedTensor) -> QuantizedTensor:
    """Give every column-block the same shared exponent across rows (the
    per-column maximum), requantizing codes by a right shift. Needed before
    shift-and-accumulate reductions over rows."""
    per_row = q.blocks_per_row
    eff_exp = (q.global_exp + q.offsets.astype(np.int64)).reshape(q.nrows, per_row)
    col_exp = eff_exp.max(axis=0)
    target = np.tile(col_exp, q.nrows)
    delta = target - eff_exp.reshape(-1)
    scale = np.exp2(-delta.astype(np.float64))[:, None]
    codes = _round_codes(q.codes.astype(np.float64) * scale, q.config.rounding).astype(np.int32)
    new_offsets = (target - q.global_exp).astype(np.int64)
    if new_offsets.max(initial=0) > _MAX_OFFSET:
        raise ConfigError("aligned offsets exceed the 4-bit range")
    return QuantizedTensor(
        config=q.config,
        dims=q.dims,
        global_exp=q.global_exp,
        offsets=new_offsets.astype(np.uint8),
        codes=codes,
        outlier_idx=q.outlier_idx,
        outlier_bits=q.outlier_bits,
    )


def _pack_codes(codes: np.ndarray, b: int) -> bytes:
    u = (codes.astype(np.int64) & ((1 << b) - 1)).astype(np.uint64)
    shifts = np.arange(b, dtype=np.uint64)
    bits = ((u[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).reshape(-1)
    return np.packbits(bits, bitorder="little").tobytes()


def _unpack_codes(buf: bytes, k: int, b: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")[: k * b]
    bits = bits.reshape(k, b).astype(np.int64)
    u = (bits << np.arange(b, dtype=np.int64)).sum(axis=1)
    return (u - ((u >> (b - 1)) & 1) * (1 << b)).astype(np.int32)


def save_quantized(q: QuantizedTensor, path) -> None:
    """Serialize to the OPQT container. Requires a uniform outlier slot
    count per block and k <= 256 (outlier indices are stored as u8)."""
    cfg = q.config
    if cfg.k > 256:
        raise ConfigError("serialized blocks support k <= 256")
    n_slots = q.outlier_idx.shape[1]
    slot_counts = (q.outlier_idx >= 0).sum(axis=1)
    if q.nblocks and not np.all(slot_counts == n_slots):
        raise ConfigError("serialization requires a uniform outlier count per block")
    if not -(1 << 15) <= q.global_exp < (1 << 15):
        raise ConfigError("global exponent does not fit in 16 bits")
    parts = [
        QUANT_MAGIC,
        struct.pack("<HHHh", cfg.k, n_slots, cfg.b, q.global_exp),
        struct.pack("<B", len(q.dims)),
        struct.pack(f"<{len(q.dims)}Q", *q.dims),
    ]
    for i in range(q.nblocks):
        parts.append(struct.pack("<B", int(q.offsets[i]) & 0x0F))
        parts.append(_pack_codes(q.codes[i], cfg.b))
        for j in range(n_slots):
            parts.append(struct.pack("<BH", int(q.outlier_idx[i, j]), int(q.outlier_bits[i, j])))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_quantized(path) -> QuantizedTensor:
    """Parse an OPQT container, validating structure and code ranges."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than the magic")
    if raw[:4] != QUANT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {QUANT_MAGIC!r}")
    if len(raw) < 4 + 8 + 1:
        raise TruncatedPayloadError(f"{path}: file ends inside the header")
    k, n, b, global_exp = struct.unpack_from("<HHHh", raw, 4)
    if not (0 < k <= 256 and 0 <= n < k and b >= 2):
        raise TensorFormatError(f"{path}: invalid config k={k} n={n} b={b}")
    (ndim,) = struct.unpack_from("<B", raw, 12)
    off = 13
    if ndim == 0 or len(raw) < off + 8 * ndim:
        raise TruncatedPayloadError(f"{path}: file ends inside the dims header")
    dims = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"{path}: zero-sized dimension in {dims}")

    cfg = QuantConfig(b=b, k=k, n=n)
    nrows = math.prod(dims[:-1]) if len(dims) > 1 else 1
    per_row = (dims[-1] + k - 1) // k
    nblocks = nrows * per_row
    code_bytes = (k * b + 7) // 8
    block_bytes = 1 + code_bytes + 3 * n
    if len(raw) != off + nblocks * block_bytes:
        raise TruncatedPayloadError(
            f"{path}: expected {off + nblocks * block_bytes} bytes, found {len(raw)}"
        )

    offsets = np.zeros(nblocks, dtype=np.uint8)
    codes = np.zeros((nblocks, k), dtype=np.int32)
    outlier_idx = np.full((nblocks, n), -1, dtype=np.int64)
    outlier_bits = np.zeros((nblocks, n), dtype=np.uint16)
    code_max = cfg.code_max
    for i in range(nblocks):
        offsets[i] = raw[off] & 0x0F
        off += 1
        codes[i] = _unpack_codes(raw[off : off + code_bytes], k, b)
        off += code_bytes
        for j in range(n):
            idx, bits = struct.unpack_from("<BH", raw, off)
            off += 3
            if idx >= k:
                raise TensorFormatError(f"{path}: outlier index {idx} out of block range")
            outlier_idx[i, j] = idx
            outlier_bits[i, j] = bits
        if n and np.unique(outlier_idx[i]).size != n:
            raise TensorFormatError(f"{path}: duplicate outlier indices in block {i}")
        if np.abs(codes[i]).max(initial=0) > code_max:
            raise TensorFormatError(f"{path}: code magnitude exceeds {code_max} in block {i}")
    return QuantizedTensor(
        config=cfg,
        dims=tuple(int(d) for d in dims),
        global_exp=int(global_exp),
        offsets=offsets,
        codes=codes,
        outlier_idx=outlier_idx,
        outlier_bits=outlier_bits,
    )
