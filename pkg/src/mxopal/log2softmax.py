"""Log2-domain softmax: attention weights as power-of-two shift amounts.

Instead of materializing softmax probabilities, each attention weight is
stored as a nonnegative shift amount s with implied weight 2^-s:

    s_i = clip(round(-log2(softmax(scores)_i)), 0, 2^bits - 1)

Two evaluation paths are provided. The exact path computes softmax in
double precision (with max subtraction) and rounds the log. The hardware
path never divides: it splits each exponential e^x (rounded to bfloat16)
and the accumulated sum into exponent and mantissa fields and forms

    result_i = (E_i - E_sum) + s,  s = sign(M_i - M_sum) gated by |M_i - M_sum| >= 0.5

using only integer subtractors and comparators. The gated sign stands in
for exact rounding of log2(1.M_i) - log2(1.M_sum), so the two paths agree
within one shift step element-wise.

The weighted reduction over value rows ("attention times V") then becomes
shift-and-accumulate over integer codes with a fixed number of fractional
guard bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bf16 import BF16_MAX, BF16_MIN_EXP, f32_to_bf16_bits
from .errors import ConfigError, ContractViolationError
from .mxquant import QuantizedTensor

GUARD_BITS = 16
# A shift this large (or larger) pushes every guard bit out of a 15-bit
# code; such rows contribute exactly zero.
_ZERO_SHIFT = GUARD_BITS + 15
_ACC_BITS = 48


@dataclass(frozen=True)
class ExpDecomposition:
    """Exponent/mantissa split of e^x rounded to bfloat16: the represented
    value is 2^exponent * (1 + mantissa) with mantissa in [0, 1)."""

    exponent: int
    mantissa: float
    saturated: bool = False


@dataclass(frozen=True)
class AttnRow:
    """Log2-quantized attention weights for one query row: shift amounts in
    [0, 2^bits - 1], implied weight 2^-shift. underflow_clips counts
    elements whose raw result was negative before the clip at zero (a
    rounding artifact; softmax cannot mathematically exceed one)."""

    shifts: np.ndarray
    bits: int
    underflow_clips: int = 0

    def __post_init__(self):
        s = np.asarray(self.shifts)
        if s.ndim != 1 or s.size == 0:
            raise ConfigError("attention row must be a non-empty vector")
        if s.min() < 0 or s.max() > self.max_shift:
            raise ConfigError("shift amounts out of range for the configured bits")

    @property
    def max_shift(self) -> int:
        return (1 << self.bits) - 1

    def weights(self) -> np.ndarray:
        return np.exp2(-self.shifts.astype(np.float64))


def _decompose_bits(bits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split bfloat16 bit patterns into (unbiased exponent, fractional
    mantissa). Subnormals and zeros flush to (-126, 0)."""
    exp_field = (bits.astype(np.int64) >> 7) & 0xFF
    mant = (bits.astype(np.int64) & 0x7F).astype(np.float64) / 128.0
    normal = exp_field > 0
    e = np.where(normal, exp_field - 127, BF16_MIN_EXP)
    m = np.where(normal, mant, 0.0)
    return e, m


def exp_decompose(x: float) -> ExpDecomposition:
    """Exponent/mantissa fields of e^x after rounding to bfloat16.

    e^x is evaluated in double precision. Overflow beyond the bfloat16
    range saturates at the largest finite value and sets the flag;
    subnormal results flush to (-126, 0).
    """
    x = float(x)
    if not np.isfinite(x):
        raise ConfigError("input must be finite")
    value = np.exp(np.float64(x))
    saturated = bool(value > BF16_MAX)
    if saturated:
        bits = np.uint16(0x7F7F)  # largest finite bfloat16
    else:
        bits = f32_to_bf16_bits(np.float32(value))
    e, m = _decompose_bits(np.asarray(bits))
    return ExpDecomposition(exponent=int(e), mantissa=float(m), saturated=saturated)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _check_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ConfigError("scores must be non-empty")
    if not np.all(np.isfinite(s)):
        raise ConfigError("scores must be finite")
    return s


def log2_softmax_exact(scores, bits: int) -> AttnRow:
    """Reference path: double-precision softmax with max subtraction, then
    shift = clip(round_half_away(-log2 p), 0, 2^bits - 1)."""
    s = _check_scores(scores)
    y = s - s.max()
    e = np.exp(y)
    p = e / e.sum()
    raw = _round_half_away(-np.log2(p))
    shifts = np.clip(raw, 0, (1 << bits) - 1).astype(np.int64)
    return AttnRow(shifts=shifts, bits=bits, underflow_clips=int((raw < 0).sum()))


def log2_softmax_hw(scores, bits: int) -> AttnRow:
    """Hardware path: bfloat16 exponent/mantissa arithmetic only.

    Each e^(x - max) is rounded to bfloat16; the sum of the rounded
    exponentials is accumulated in single precision, rounded to bfloat16,
    and both are decomposed into (E, M) fields. The shift amount is
    -( (E_i - E_sum) + gated_sign ) clipped into [0, 2^bits - 1].
    """
    s = _check_scores(scores)
    y = s - s.max()
    e_bits = f32_to_bf16_bits(np.exp(y).astype(np.float32))
    e_vals = (e_bits.astype(np.uint32) << np.uint32(16)).view(np.float32)
    total = np.float32(e_vals.sum(dtype=np.float32))
    sum_bits = f32_to_bf16_bits(total)
    e_i, m_i = _decompose_bits(e_bits)
    e_sum, m_sum = _decompose_bits(np.asarray(sum_bits))
    dm = m_i - m_sum
    gated = np.where(np.abs(dm) >= 0.5, np.sign(dm), 0.0)
    result = (e_i - e_sum).astype(np.float64) + gated
    raw = -result
    shifts = np.clip(raw, 0, (1 << bits) - 1).astype(np.int64)
    return AttnRow(shifts=shifts, bits=bits, underflow_clips=int((raw < 0).sum()))


def attn_shift_accumulate(
    attn: AttnRow, v: QuantizedTensor, guard_bits: int = GUARD_BITS
) -> np.ndarray:
    """Weighted sum of value rows using integer shifts only.

    v holds the value rows, dims [rows, dim], with every column-block
    sharing one exponent across rows (see align_block_scales). For each
    output column d the integer part accumulates

        sum_j (code[j, d] << guard_bits) >> shift_j

    in a 48-bit signed accumulator; shifts of guard_bits + 15 or more
    contribute exactly zero. The integer sum is scaled by the block step
    times 2^-guard_bits; preserved outliers are added on a floating-point
    side path with the same power-of-two weights.
    """
    if len(v.dims) != 2:
        raise ConfigError("value tensor must be 2-D [rows, dim]")
    rows, dim = v.dims
    shifts = attn.shifts
    if shifts.size != rows:
        raise ConfigError(f"attention length {shifts.size} != value rows {rows}")

    per_row = v.blocks_per_row
    eff_exp = (v.global_exp + v.offsets.astype(np.int64)).reshape(rows, per_row)
    if not np.all(eff_exp == eff_exp[0]):
        raise ConfigError("value rows must share one exponent per column-block")
    col_exp = eff_exp[0]

    worst = rows * ((1 << (v.config.b - 1)) - 1) * (1 << guard_bits)
    if worst >= 1 << (_ACC_BITS - 1):
        raise ContractViolationError(
            f"worst-case accumulator magnitude {worst} exceeds {_ACC_BITS}-bit range"
        )

    codes = v.codes.reshape(rows, per_row * v.config.k).astype(np.int64)
    live = shifts < guard_bits + 15
    safe_shifts = np.where(live, shifts, 0)  # dead rows are masked, not shifted
    shifted = (codes << guard_bits) >> safe_shifts[:, None]
    shifted[~live] = 0
    acc = shifted.sum(axis=0)  # (padded dim,)

    steps = np.exp2((col_exp - v.config.b + 2).astype(np.float64))
    int_part = acc.reshape(per_row, v.config.k).astype(np.float64) * (
        steps[:, None] * 2.0**-guard_bits
    )

    out = int_part.reshape(-1)
    valid = v.outlier_idx >= 0
    if valid.any():
        blk_rows, slots = np.nonzero(valid)
        row_of_block = blk_rows // per_row
        col_of_block = blk_rows % per_row
        keep = live[row_of_block]
        if keep.any():
            blk_rows, slots = blk_rows[keep], slots[keep]
            row_of_block, col_of_block = row_of_block[keep], col_of_block[keep]
            cols = col_of_block * v.config.k + v.outlier_idx[blk_rows, slots]
            weights = np.exp2(-shifts[row_of_block].astype(np.float64))
            values = (
                (v.outlier_bits[blk_rows, slots].astype(np.uint32) << np.uint32(16))
                .view(np.float32)
                .astype(np.float64)
            )
            np.add.at(out, cols, weights * values)
    return out[:dim].astype(np.float32)
