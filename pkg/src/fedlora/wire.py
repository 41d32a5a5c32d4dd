"""Binary update messages and communication-cost accounting.

Message layout (all integers little-endian):

    header:  magic 'UMSG' | u16 version | u32 round | u32 sender | u32 count
    record:  u16 name_len | name utf-8
             u8 encoding (32 = fp32, else the bit width 8/4/2)
             u8 rank | u32 x rank extents
             quantized only: u8 axis | u32 channels
                             f32 x channels scales | f32 x channels zero points
             u32 payload_len | payload

FP32 payloads are raw row-major bytes and round-trip bit-exactly; quantized
payloads are packed codes and round-trip code-exactly. The same container is
reused for at-rest checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adapters as A
from . import models as M
from . import quant as Q
from .errors import ConfigError, IntegrityError, ProtocolError
from .tensor import Tensor

MAGIC = b"UMSG"
VERSION = 1
ENC_FP32 = 32
HEADER = struct.Struct("<4sHIII")
SERVER_SENDER = 0xFFFFFFFF

# Group-norm tensors travel in FP32 regardless of the configured bit width.
_NORM_ROLES = set(M.NORM_ROLES)


def is_norm_tensor(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in _NORM_ROLES


def tcc(rounds: int, bytes_per_exchange: int) -> int:
    """Total communication cost over `rounds`: one uplink plus one downlink
    of `bytes_per_exchange` per round."""
    if rounds < 0:
        raise ConfigError(f"rounds must be >= 0, got {rounds}")
    if bytes_per_exchange < 0:
        raise ConfigError(f"bytes_per_exchange must be >= 0, got {bytes_per_exchange}")
    return 2 * rounds * bytes_per_exchange


def encode_tensors(
    named: list[tuple[str, np.ndarray]], bits: int | None
) -> list[tuple[str, np.ndarray | Q.QuantizedTensor]]:
    """Quantize every tensor except normalization gammas/betas when a bit
    width is given; pass everything through as FP32 otherwise."""
    if bits is None:
        return [(name, arr) for name, arr in named]
    out: list[tuple[str, np.ndarray | Q.QuantizedTensor]] = []
    for name, arr in named:
        if is_norm_tensor(name):
            out.append((name, arr))
            continue
        axis = Q.channel_axis_for(arr.shape)
        qp = Q.compute_affine_params(arr, axis, bits)
        out.append((name, Q.quantize(arr, qp)))
    return out


def decode_tensors(
    entries: dict[str, np.ndarray | Q.QuantizedTensor]
) -> dict[str, np.ndarray]:
    """Dequantize any quantized entries, yielding plain FP32 arrays."""
    out: dict[str, np.ndarray] = {}
    for name, value in entries.items():
        if isinstance(value, Q.QuantizedTensor):
            out[name] = Q.dequantize(value).data
        else:
            out[name] = value
    return out


def serialize(
    entries: list[tuple[str, np.ndarray | Tensor | Q.QuantizedTensor]],
    round_index: int = 0,
    sender: int = SERVER_SENDER,
) -> bytes:
    """Write tensors in the given order; names must be unique."""
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise ProtocolError("duplicate tensor name in update message")
    parts = [HEADER.pack(MAGIC, VERSION, round_index, sender, len(entries))]
    for name, value in entries:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        if isinstance(value, Q.QuantizedTensor):
            shape = value.shape
            parts.append(struct.pack("<BB", value.params.bits, len(shape)))
            parts.append(struct.pack(f"<{len(shape)}I", *shape))
            ch = value.params.channels
            parts.append(struct.pack("<BI", value.params.axis, ch))
            parts.append(value.params.scale.astype("<f4").tobytes())
            parts.append(value.params.zero_point.astype("<f4").tobytes())
            payload = value.packed
        else:
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            if arr.dtype != np.float32:
                raise ProtocolError(f"tensor '{name}' must be float32, got {arr.dtype}")
            shape = arr.shape
            parts.append(struct.pack("<BB", ENC_FP32, len(shape)))
            parts.append(struct.pack(f"<{len(shape)}I", *shape))
            payload = np.ascontiguousarray(arr).tobytes()
        parts.append(struct.pack("<I", len(payload)))
        parts.append(payload)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError(
                f"message truncated: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_B = struct.Struct("<B")
_BB = struct.Struct("<BB")
_BI = struct.Struct("<BI")


def deserialize(buf: bytes) -> tuple[dict, dict[str, np.ndarray | Q.QuantizedTensor]]:
    """Parse a message into (header metadata, name -> tensor)."""
    r = _Reader(buf)
    magic, version, round_index, sender, count = r.unpack(HEADER)
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}")
    if version != VERSION:
        raise IntegrityError(f"unsupported message version {version}")
    entries: dict[str, np.ndarray | Q.QuantizedTensor] = {}
    for _ in range(count):
        (name_len,) = r.unpack(_U16)
        name = r.take(name_len).decode("utf-8")
        if name in entries:
            raise IntegrityError(f"duplicate tensor '{name}' in message")
        encoding, rank = r.unpack(_BB)
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
        elements = int(np.prod(shape)) if shape else 1
        if encoding == ENC_FP32:
            (payload_len,) = r.unpack(_U32)
            if payload_len != 4 * elements:
                raise IntegrityError(
                    f"tensor '{name}': payload {payload_len} bytes, expected {4 * elements}"
                )
            arr = np.frombuffer(r.take(payload_len), dtype="<f4").reshape(shape).copy()
            entries[name] = arr
        elif encoding in Q.SUPPORTED_BITS:
            axis, channels = r.unpack(_BI)
            scale = np.frombuffer(r.take(4 * channels), dtype="<f4").copy()
            zp_f = np.frombuffer(r.take(4 * channels), dtype="<f4")
            params = Q.QuantParams(
                bits=encoding, axis=axis, scale=scale,
                zero_point=zp_f.astype(np.int32),
            )
            (payload_len,) = r.unpack(_U32)
            expected = Q.packed_code_bytes(elements, encoding)
            if payload_len != expected:
                raise IntegrityError(
                    f"tensor '{name}': packed payload {payload_len} bytes, expected {expected}"
                )
            entries[name] = Q.QuantizedTensor(
                packed=r.take(payload_len), shape=shape, params=params
            )
        else:
            raise IntegrityError(f"tensor '{name}': unknown encoding tag {encoding}")
    if r.pos != len(buf):
        raise IntegrityError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return (
        {"round": round_index, "sender": sender, "version": version},
        entries,
    )


@dataclass
class CostLedger:
    """Per-round uplink/downlink byte accounting for a single client."""

    entries: list[tuple[int, int, int]] = field(default_factory=list)

    def record(self, round_index: int, downlink_bytes: int, uplink_bytes: int) -> None:
        self.entries.append((round_index, downlink_bytes, uplink_bytes))

    @property
    def total_bytes(self) -> int:
        return sum(d + u for _, d, u in self.entries)

    @property
    def downlink_bytes(self) -> int:
        return sum(d for _, d, _ in self.entries)

    @property
    def uplink_bytes(self) -> int:
        return sum(u for _, _, u in self.entries)


# ---------------------------------------------------------------------------
# checkpoints and size reports


def save_checkpoint(path, params: M.ParamSet, round_index: int = 0) -> None:
    entries = sorted(
        (M.ParamSet.flat_name(key), t.data) for key, t in params.items()
    )
    Path(path).write_bytes(serialize(entries, round_index=round_index))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    _, entries = deserialize(Path(path).read_bytes())
    return decode_tensors(entries)


@dataclass(frozen=True)
class SizeReport:
    model: str
    rank: int | None
    bits: int | None
    rounds: int
    total_params: int
    trainable_params: int
    message_bytes: int  # measured from an actual serialized message
    payload_bytes: int  # header-free cost-equation bytes per exchange
    tcc_bytes: int

    def as_row(self) -> dict:
        return {
            "model": self.model,
            "rank": "" if self.rank is None else self.rank,
            "bits": "fp32" if self.bits is None else self.bits,
            "rounds": self.rounds,
            "total_params": self.total_params,
            "trainable_params": self.trainable_params,
            "message_bytes": self.message_bytes,
            "payload_bytes": self.payload_bytes,
            "tcc_bytes": self.tcc_bytes,
            "tcc_mb": self.tcc_bytes / 1e6,
        }


def payload_bytes_for(named: list[tuple[str, np.ndarray]], bits: int | None) -> int:
    """Cost-equation bytes for one exchange: 4 bytes per FP32 element, packed
    codes plus channel overhead for quantized tensors."""
    total = 0
    for name, arr in named:
        if bits is None or is_norm_tensor(name):
            total += 4 * arr.size
        else:
            total += Q.quantized_payload_bytes(arr.shape, Q.channel_axis_for(arr.shape), bits)
    return total


def message_size_report(
    model: str,
    rank: int | None,
    bits: int | None,
    rounds: int = 100,
    num_classes: int = 10,
    alpha_factor: float = 16.0,
) -> SizeReport:
    """Build the model, serialize one update message, and report its size
    alongside parameter counts and the cost over `rounds`."""
    if model not in M.BUILDERS:
        raise ConfigError(f"unknown model '{model}'; expected one of {sorted(M.BUILDERS)}")
    spec, params = M.BUILDERS[model](num_classes=num_classes, seed=0)
    total = M.count_parameters(params)
    if rank is None:
        named = sorted(
            (M.ParamSet.flat_name(key), t.data) for key, t in params.items()
        )
    else:
        adapted = A.attach_adapters(
            spec, params, rank, alpha_factor * rank, A.FreezePolicy(), seed=0
        )
        named = [(name, t.data) for name, t in adapted.trainable()]
        total += sum(p.a.size + p.b.size for p in adapted.adapters.values())
    trainable = sum(arr.size for _, arr in named)
    message = serialize(encode_tensors(named, bits))
    payload = payload_bytes_for(named, bits)
    return SizeReport(
        model=model,
        rank=rank,
        bits=bits,
        rounds=rounds,
        total_params=total,
        trainable_params=trainable,
        message_bytes=len(message),
        payload_bytes=payload,
        tcc_bytes=tcc(rounds, payload),
    )
