"""Bit-exact packet and message formats.

Data channel (one datagram per chunk)::

    seq:u32 | round:u64 | length:u16 | payload[length]        (big-endian)

Reliable channel: every message is a frame ``len:u32 | body[len]``. A body
whose first byte is 0x01-0x03 is a control message::

    kind:u8 | round:u64 | bitmap_len:u32 | bitmap[bitmap_len]

Any other body is a UTF-8 session message (the metadata handshake and
per-round notices), one ``key=value`` or ``tensor <name> <count>`` per line.

Bitmaps are packed MSB-first: chunk ``i`` is bit ``7 - i % 8`` of byte
``i // 8``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

HEADER = struct.Struct("!IQH")
HEADER_SIZE = HEADER.size  # 14
MAX_DATAGRAM_BYTES = 1400
# 1400 - 14 rounded down to a whole number of float32 elements
DEFAULT_MAX_PAYLOAD = 1384

CONTROL_HEADER = struct.Struct("!BQI")
FRAME_PREFIX = struct.Struct("!I")
MAX_FRAME_BYTES = 64 * 1024 * 1024

U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1


class WireError(Exception):
    """Malformed bytes on either channel."""


class TruncatedPacket(WireError):
    """Datagram shorter than its header plus declared payload length."""


class UnknownKind(WireError):
    """Control frame with a kind byte outside {1, 2, 3}."""


@dataclass(frozen=True)
class ChunkHeader:
    seq: int
    round: int
    length: int

    def __post_init__(self):
        if not 0 <= self.seq <= U32_MAX:
            raise ValueError(f"seq out of range: {self.seq}")
        if not 0 <= self.round <= U64_MAX:
            raise ValueError(f"round out of range: {self.round}")
        if not 0 <= self.length <= 0xFFFF:
            raise ValueError(f"length out of range: {self.length}")


@dataclass(frozen=True)
class GradientChunk:
    header: ChunkHeader
    payload: bytes

    def __post_init__(self):
        if len(self.payload) != self.header.length:
            raise ValueError(
                f"payload is {len(self.payload)} bytes, header says {self.header.length}"
            )

    @classmethod
    def make(cls, seq: int, round: int, payload: bytes) -> GradientChunk:
        payload = bytes(payload)
        return cls(ChunkHeader(seq, round, len(payload)), payload)


def encode_chunk(chunk: GradientChunk) -> bytes:
    h = chunk.header
    return HEADER.pack(h.seq, h.round, h.length) + chunk.payload


def decode_chunk_prefix(data: bytes | memoryview, offset: int = 0) -> tuple[GradientChunk, int]:
    """Decode one chunk starting at ``offset``; return it and the next offset."""
    if len(data) - offset < HEADER_SIZE:
        raise TruncatedPacket(f"{len(data) - offset} bytes is below the {HEADER_SIZE}-byte header")
    seq, rnd, length = HEADER.unpack_from(data, offset)
    end = offset + HEADER_SIZE + length
    if end > len(data):
        raise TruncatedPacket(f"header declares {length} payload bytes, {len(data) - offset - HEADER_SIZE} present")
    payload = bytes(data[offset + HEADER_SIZE:end])
    return GradientChunk(ChunkHeader(seq, rnd, length), payload), end


def decode_chunk(data: bytes | memoryview) -> GradientChunk:
    chunk, end = decode_chunk_prefix(data)
    if end != len(data):
        raise WireError(f"{len(data) - end} trailing bytes after chunk payload")
    return chunk


def chunk_count(nbytes: int, max_payload: int = DEFAULT_MAX_PAYLOAD) -> int:
    return math.ceil(nbytes / max_payload)


def split_buffer(data: bytes, round: int, max_payload: int = DEFAULT_MAX_PAYLOAD) -> list[GradientChunk]:
    """Cut a flattened gradient buffer into chunks in seq order."""
    view = memoryview(data)
    return [
        GradientChunk.make(seq, round, view[off:off + max_payload])
        for seq, off in enumerate(range(0, len(data), max_payload))
    ]


class ControlKind(IntEnum):
    PROBE = 0x01
    BITMAP = 0x02
    STOP = 0x03


@dataclass(frozen=True)
class ControlMessage:
    kind: ControlKind
    round: int
    bitmap: bytes | None = None

    def __post_init__(self):
        if (self.kind == ControlKind.BITMAP) != (self.bitmap is not None):
            raise ValueError("bitmap must be present iff kind is BITMAP")
        if not 0 <= self.round <= U64_MAX:
            raise ValueError(f"round out of range: {self.round}")

    @classmethod
    def probe(cls, round: int) -> ControlMessage:
        return cls(ControlKind.PROBE, round)

    @classmethod
    def stop(cls, round: int) -> ControlMessage:
        return cls(ControlKind.STOP, round)

    @classmethod
    def with_bitmap(cls, round: int, bitmap: bytes) -> ControlMessage:
        return cls(ControlKind.BITMAP, round, bytes(bitmap))


def encode_control(msg: ControlMessage) -> bytes:
    bitmap = msg.bitmap or b""
    return CONTROL_HEADER.pack(int(msg.kind), msg.round, len(bitmap)) + bitmap


def decode_control(data: bytes | memoryview) -> ControlMessage:
    if len(data) < CONTROL_HEADER.size:
        raise WireError(f"control message of {len(data)} bytes is below the {CONTROL_HEADER.size}-byte header")
    kind, rnd, blen = CONTROL_HEADER.unpack_from(data)
    try:
        kind = ControlKind(kind)
    except ValueError:
        raise UnknownKind(f"control kind 0x{kind:02x}") from None
    if len(data) != CONTROL_HEADER.size + blen:
        raise WireError(f"bitmap_len {blen} disagrees with {len(data) - CONTROL_HEADER.size} trailing bytes")
    if kind == ControlKind.BITMAP:
        return ControlMessage(kind, rnd, bytes(data[CONTROL_HEADER.size:]))
    if blen:
        raise WireError(f"{kind.name} carries a {blen}-byte bitmap")
    return ControlMessage(kind, rnd)


def is_control_body(body: bytes) -> bool:
    return len(body) > 0 and body[0] in (0x01, 0x02, 0x03)


def frame(body: bytes) -> bytes:
    return FRAME_PREFIX.pack(len(body)) + body


class FrameReader:
    """Incremental splitter for the length-prefixed reliable stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        out = []
        while len(self._buf) >= FRAME_PREFIX.size:
            (n,) = FRAME_PREFIX.unpack_from(self._buf)
            if n > MAX_FRAME_BYTES:
                raise WireError(f"frame of {n} bytes exceeds limit")
            if len(self._buf) < FRAME_PREFIX.size + n:
                break
            out.append(bytes(self._buf[FRAME_PREFIX.size:FRAME_PREFIX.size + n]))
            del self._buf[:FRAME_PREFIX.size + n]
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


@dataclass(frozen=True)
class MetadataAnnouncement:
    total_chunks: int
    layout: tuple[tuple[str, int], ...]
    extras: dict[str, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layout", tuple((str(n), int(c)) for n, c in self.layout))
        for name, count in self.layout:
            if not name or any(ch.isspace() for ch in name):
                raise ValueError(f"tensor name {name!r} must be non-empty without whitespace")
            if count < 0:
                raise ValueError(f"tensor {name} has negative element count")

    @property
    def element_count(self) -> int:
        return sum(c for _, c in self.layout)

    @property
    def nbytes(self) -> int:
        return 4 * self.element_count

    @classmethod
    def for_layout(cls, layout, max_payload: int = DEFAULT_MAX_PAYLOAD, **extras) -> MetadataAnnouncement:
        layout = tuple((n, int(c)) for n, c in layout)
        total = chunk_count(4 * sum(c for _, c in layout), max_payload)
        return cls(total, layout, {k: str(v) for k, v in extras.items()})


def encode_metadata(ann: MetadataAnnouncement) -> bytes:
    lines = [f"total_chunks={ann.total_chunks}"]
    lines += [f"{k}={v}" for k, v in ann.extras.items()]
    lines += [f"tensor {name} {count}" for name, count in ann.layout]
    return ("\n".join(lines) + "\n").encode()


def decode_metadata(body: bytes) -> MetadataAnnouncement:
    total = None
    layout = []
    extras = {}
    for line in body.decode().splitlines():
        if not line:
            continue
        if line.startswith("tensor "):
            parts = line.split(" ")
            if len(parts) != 3:
                raise WireError(f"bad tensor line {line!r}")
            layout.append((parts[1], int(parts[2])))
        elif "=" in line:
            k, v = line.split("=", 1)
            if k == "total_chunks":
                total = int(v)
            else:
                extras[k] = v
        else:
            raise WireError(f"bad metadata line {line!r}")
    if total is None:
        raise WireError("metadata lacks total_chunks")
    return MetadataAnnouncement(total, tuple(layout), extras)


def encode_notice(kind: str, **fields) -> bytes:
    """One-line session message, e.g. ``tolerance round=3 p=0.408``."""
    return (" ".join([kind] + [f"{k}={v}" for k, v in fields.items()]) + "\n").encode()


def decode_notice(body: bytes) -> tuple[str, dict[str, str]]:
    kind, *rest = body.decode().split()
    return kind, dict(item.split("=", 1) for item in rest)


def flatten(tensors) -> bytes:
    """Concatenate tensors into one little-endian float32 buffer."""
    if not tensors:
        return b""
    return np.concatenate([np.asarray(t, dtype="<f4").ravel() for t in tensors]).tobytes()
