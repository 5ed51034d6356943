"""Tensor container, deterministic synthetic data, and the binary tensor format.

File layout (little-endian), magic "OPTN":

    magic   4 bytes  b"OPTN"
    version u16      1
    dtype   u8       0 (float32)
    ndim    u8
    dims    u64 * ndim
    payload float32 * prod(dims), row-major

CSV ingestion (one value per line) is supported for 1-D vectors.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    NonFiniteValueError,
    TensorFormatError,
    TruncatedPayloadError,
)
from .rng import Stream

MAGIC = b"OPTN"
FORMAT_VERSION = 1
_HEADER_FIXED = struct.Struct("<4sHBB")

# Stream ids so bulk values and outlier placement draw independent sequences.
_STREAM_VALUES = 0
_STREAM_OUTLIERS = 1
_STREAM_SIGNS = 2


@dataclass(frozen=True)
class Tensor:
    """A dense float32 tensor: positive dims plus row-major data."""

    dims: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) == 0:
            raise ConfigError("tensor dims must be non-empty")
        if any(d <= 0 for d in dims):
            raise ConfigError(f"tensor dims must be positive, got {dims}")
        data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if data.size != math.prod(dims):
            raise ConfigError(
                f"dims {dims} declare {math.prod(dims)} elements, data has {data.size}"
            )
        if not np.all(np.isfinite(data)):
            raise NonFiniteValueError("tensor data contains NaN or infinity")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> int:
        return self.data.size

    def as_array(self) -> np.ndarray:
        """Data reshaped to dims (a view when possible)."""
        return self.data.reshape(self.dims)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for deterministic synthetic tensors.

    distribution: "gaussian" (scale * z) or "lognormal" (sign * scale * e^z).
    outlier_rate: per-element probability of an injected outlier, so the
    expected count per 128-element block is rate * 128.
    outlier_multiplier: magnitude factor applied at injected positions.
    """

    distribution: str = "gaussian"
    scale: float = 1.0
    outlier_rate: float = 0.0
    outlier_multiplier: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in ("gaussian", "lognormal"):
            raise ConfigError(f"unknown distribution {self.distribution!r}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ConfigError("scale must be positive and finite")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ConfigError("outlier rate must lie in [0, 1]")
        if self.outlier_multiplier < 1.0:
            raise ConfigError("outlier multiplier must be >= 1")


def generate_synthetic(spec: SyntheticSpec, dims) -> Tensor:
    """Deterministic synthetic tensor; a pure function of (spec, dims)."""
    dims = tuple(int(d) for d in dims)
    count = math.prod(dims) if dims else 0
    if not dims or count <= 0:
        raise ConfigError("dims must be non-empty and positive")

    values = Stream(spec.seed, _STREAM_VALUES).gaussian(count)
    if spec.distribution == "gaussian":
        out = spec.scale * values
    else:
        signs = np.where(Stream(spec.seed, _STREAM_SIGNS).bernoulli(count, 0.5), 1.0, -1.0)
        out = signs * spec.scale * np.exp(values)

    if spec.outlier_rate > 0.0:
        mask = Stream(spec.seed, _STREAM_OUTLIERS).bernoulli(count, spec.outlier_rate)
        out = np.where(mask, out * spec.outlier_multiplier, out)
    return Tensor(dims, out.astype(np.float32))


def save_tensor(t: Tensor, path) -> None:
    """Write the binary tensor format; save then load is byte-identical."""
    header = _HEADER_FIXED.pack(MAGIC, FORMAT_VERSION, 0, len(t.dims))
    dims = struct.pack(f"<{len(t.dims)}Q", *t.dims)
    payload = t.data.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header + dims + payload)


def load_tensor(path) -> Tensor:
    """Read the binary tensor format, validating magic, size, and finiteness."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER_FIXED.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the fixed header")
    magic, version, dtype, ndim = _HEADER_FIXED.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if dtype != 0:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype}")
    if ndim == 0:
        raise TensorFormatError(f"{path}: ndim must be at least 1")
    off = _HEADER_FIXED.size
    if len(raw) < off + 8 * ndim:
        raise TruncatedPayloadError(f"{path}: file ends inside the dims header")
    dims = struct.unpack_from(f"<{ndim}Q", raw, off)
    off += 8 * ndim
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"{path}: zero-sized dimension in {dims}")
    count = math.prod(dims)
    expected = off + 4 * count
    if len(raw) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload declares {count} elements but only "
            f"{(len(raw) - off) // 4} are present"
        )
    if len(raw) > expected:
        raise TensorFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError(f"{path}: payload contains NaN or infinity")
    return Tensor(dims, data.astype(np.float32))


def load_csv(path) -> Tensor:
    """Read a 1-D vector from a CSV file with one value per line."""
    values = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                values.append(float(text))
            except ValueError as e:
                raise TensorFormatError(f"{path}:{lineno}: not a number: {text!r}") from e
    if not values:
        raise TensorFormatError(f"{path}: no values found")
    arr = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValueError(f"{path}: values contain NaN or infinity")
    return Tensor((len(values),), arr)
