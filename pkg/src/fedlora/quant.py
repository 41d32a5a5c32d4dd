"""Affine round-to-nearest quantization with per-channel scale and zero point.

Codes are unsigned b-bit integers, b in {2, 4, 8}. The quantization range of
each channel slice is widened to include zero, so zero is always exactly
representable; a slice that is identically zero falls back to scale 1. Ties
round half away from zero. Packed codes are stored densely, little-endian
within each byte (code i of a b=2 tensor occupies bits (i%4)*2 of byte i//4).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IntegrityError, ShapeError
from .tensor import Tensor

SUPPORTED_BITS = (2, 4, 8)

# FP32 scale + FP32-encoded zero point accompany every channel slice.
CHANNEL_OVERHEAD_BYTES = 8


@dataclass(frozen=True)
class QuantParams:
    bits: int
    axis: int
    scale: np.ndarray  # float32 [channels], strictly positive
    zero_point: np.ndarray  # int32 [channels] in [0, 2^bits - 1]

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ConfigError(f"bit width must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.scale.shape != self.zero_point.shape:
            raise ShapeError("scale and zero_point must have one entry per channel")
        if not (self.scale > 0).all():
            raise ShapeError("scales must be strictly positive")

    @property
    def channels(self) -> int:
        return self.scale.shape[0]


@dataclass(frozen=True)
class QuantizedTensor:
    packed: bytes
    shape: tuple[int, ...]
    params: QuantParams

    @property
    def element_count(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def codes(self) -> np.ndarray:
        flat = unpack_codes(self.packed, self.params.bits, self.element_count)
        return flat.reshape(self.shape)


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


def _broadcast_shape(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    return tuple(shape[i] if i == axis else 1 for i in range(len(shape)))


def channel_axis_for(shape: tuple[int, ...]) -> int:
    """Default slicing axis: output channels for 4-D conv weights (axis 0),
    output columns for 2-D fc weights (axis 1), axis 0 otherwise."""
    return 1 if len(shape) == 2 else 0


def compute_affine_params(x, axis: int, bits: int) -> QuantParams:
    """Per-slice scale and zero point over the range widened to include 0."""
    values = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"bit width must be one of {SUPPORTED_BITS}, got {bits}")
    if not -values.ndim <= axis < values.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {values.shape}")
    axis = axis % values.ndim
    qmax = (1 << bits) - 1
    moved = np.moveaxis(values, axis, 0).reshape(values.shape[axis], -1)
    if moved.shape[1] == 0:
        mins = np.zeros(moved.shape[0], np.float32)
        maxs = np.zeros(moved.shape[0], np.float32)
    else:
        mins = np.minimum(moved.min(axis=1), 0.0).astype(np.float32)
        maxs = np.maximum(moved.max(axis=1), 0.0).astype(np.float32)
    scale = (maxs - mins) / np.float32(qmax)
    degenerate = scale == 0
    scale = np.where(degenerate, np.float32(1.0), scale).astype(np.float32)
    zp = _round_half_away(-mins / scale)
    zp = np.clip(zp, 0, qmax).astype(np.int32)
    return QuantParams(bits=bits, axis=axis, scale=scale, zero_point=zp)


def quantize(x, params: QuantParams) -> QuantizedTensor:
    """Round-to-nearest code assignment, clamped to [0, 2^bits - 1]."""
    values = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if params.channels != values.shape[params.axis]:
        raise ShapeError(
            f"quant params carry {params.channels} channels but axis "
            f"{params.axis} of {values.shape} has {values.shape[params.axis]}"
        )
    qmax = (1 << params.bits) - 1
    bshape = _broadcast_shape(values.shape, params.axis)
    scale = params.scale.reshape(bshape)
    zp = params.zero_point.reshape(bshape)
    codes = _round_half_away(values / scale) + zp
    codes = np.clip(codes, 0, qmax).astype(np.uint8)
    return QuantizedTensor(
        packed=pack_codes(codes.reshape(-1), params.bits),
        shape=values.shape,
        params=params,
    )


def dequantize(q: QuantizedTensor) -> Tensor:
    """Reconstruct scale * (code - zero_point) in the original shape."""
    codes = q.codes().astype(np.float32)
    bshape = _broadcast_shape(q.shape, q.params.axis)
    scale = q.params.scale.reshape(bshape)
    zp = q.params.zero_point.astype(np.float32).reshape(bshape)
    return Tensor(scale * (codes - zp))


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack b-bit codes densely, little-endian within each byte."""
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"bit width must be one of {SUPPORTED_BITS}, got {bits}")
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    qmax = (1 << bits) - 1
    if codes.size and codes.max() > qmax:
        raise ShapeError(f"code out of range for {bits}-bit packing")
    per_byte = 8 // bits
    pad = (-codes.size) % per_byte
    if pad:
        codes = np.concatenate([codes, np.zeros(pad, np.uint8)])
    groups = codes.reshape(-1, per_byte).astype(np.uint16)
    shifts = np.arange(per_byte, dtype=np.uint16) * bits
    packed = (groups << shifts).sum(axis=1).astype(np.uint8)
    return packed.tobytes()


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of pack_codes for a known code count."""
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"bit width must be one of {SUPPORTED_BITS}, got {bits}")
    expected = packed_code_bytes(count, bits)
    if len(buf) != expected:
        raise IntegrityError(
            f"packed payload holds {len(buf)} bytes, expected {expected} for "
            f"{count} codes at {bits} bits"
        )
    raw = np.frombuffer(buf, dtype=np.uint8)
    per_byte = 8 // bits
    mask = np.uint8((1 << bits) - 1)
    shifts = np.arange(per_byte, dtype=np.uint8) * bits
    codes = ((raw[:, None] >> shifts) & mask).reshape(-1)
    return codes[:count].copy()


def packed_code_bytes(count: int, bits: int) -> int:
    return math.ceil(count * bits / 8)


def quantized_payload_bytes(shape: tuple[int, ...], axis: int, bits: int) -> int:
    """Wire bytes for one quantized tensor: packed codes plus the per-channel
    FP32 scale and FP32-encoded zero point."""
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"bit width must be one of {SUPPORTED_BITS}, got {bits}")
    elements = 1
    for extent in shape:
        elements *= extent
    channels = shape[axis] if shape else 1
    return packed_code_bytes(elements, bits) + channels * CHANNEL_OVERHEAD_BYTES
