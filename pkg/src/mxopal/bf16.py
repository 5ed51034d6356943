"""bfloat16 bit manipulation: conversion, field extraction, exponent/mantissa splits.

bfloat16 is the top half of an IEEE single: 1 sign bit, 8 exponent bits
(bias 127), 7 stored mantissa bits. All helpers accept scalars or numpy
arrays and are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BF16_BIAS = 127
BF16_MANT_BITS = 7
# Largest finite bfloat16 (0x7F7F): 2^127 * (2 - 2^-7).
BF16_MAX = float(np.array([0x7F7F0000], dtype=np.uint32).view(np.float32)[0])
# Smallest normal exponent; also the sentinel exponent used for zero blocks.
BF16_MIN_EXP = -126


def f32_to_bf16_bits(x, mode: str = "nearest-even") -> np.ndarray:
    """Round single-precision values to bfloat16 and return the uint16 bit patterns.

    mode is "nearest-even" (default) or "truncate". Inputs must be finite;
    values whose rounding overflows the bfloat16 range become +-inf bit
    patterns, which callers are expected to guard against.
    """
    u32 = np.asarray(x, dtype=np.float32).view(np.uint32)
    if mode == "nearest-even":
        # Classic RNE bit trick: add 0x7FFF plus the LSB of the kept part.
        lsb = (u32 >> np.uint32(16)) & np.uint32(1)
        u32 = u32 + np.uint32(0x7FFF) + lsb
    elif mode != "truncate":
        raise ValueError(f"unknown bfloat16 rounding mode: {mode!r}")
    return (u32 >> np.uint32(16)).astype(np.uint16)


def bf16_bits_to_f32(bits) -> np.ndarray:
    """Decode uint16 bfloat16 bit patterns to exact float32 values."""
    b = np.asarray(bits, dtype=np.uint16)
    return (b.astype(np.uint32) << np.uint32(16)).view(np.float32)


def round_to_bf16(x, mode: str = "nearest-even") -> np.ndarray:
    """Round float values to the nearest representable bfloat16, as float32."""
    return bf16_bits_to_f32(f32_to_bf16_bits(x, mode=mode))


def unbiased_exponent(x) -> np.ndarray:
    """floor(log2(|x|)) of finite nonzero values, floored at the minimum
    normal bfloat16 exponent (-126). Zeros also map to -126."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    _, e = np.frexp(a)  # a = m * 2^e with m in [0.5, 1)
    e = np.where(a == 0.0, BF16_MIN_EXP, e - 1)
    return np.maximum(e, BF16_MIN_EXP).astype(np.int64)


@dataclass(frozen=True)
class BF16Value:
    """One bfloat16 value split into its bit fields.

    sign is 0 or 1, exponent is the 8-bit biased field (bias 127), mantissa
    the 7 stored bits (implicit leading 1 for normals).
    """

    sign: int
    exponent: int
    mantissa: int

    def __post_init__(self):
        if self.sign not in (0, 1):
            raise ValueError("sign must be 0 or 1")
        if not 0 <= self.exponent <= 0xFF:
            raise ValueError("exponent field must fit in 8 bits")
        if not 0 <= self.mantissa <= 0x7F:
            raise ValueError("mantissa field must fit in 7 bits")

    @classmethod
    def from_bits(cls, bits: int) -> "BF16Value":
        bits = int(bits) & 0xFFFF
        return cls(sign=bits >> 15, exponent=(bits >> 7) & 0xFF, mantissa=bits & 0x7F)

    @classmethod
    def from_float(cls, value: float, mode: str = "nearest-even") -> "BF16Value":
        return cls.from_bits(int(f32_to_bf16_bits(np.float32(value), mode=mode)))

    def to_bits(self) -> int:
        return (self.sign << 15) | (self.exponent << 7) | self.mantissa

    def to_float(self) -> float:
        return float(bf16_bits_to_f32(np.uint16(self.to_bits())))
