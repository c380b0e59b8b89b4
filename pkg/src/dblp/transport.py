"""Bounded-loss sender/receiver state machines and their blocking drivers.

``Sender`` and ``Receiver`` hold all protocol state and do no I/O, so the
same objects run over real sockets (``dblp_send``/``dblp_recv``), over the
in-process channels, and inside the virtual-time simulator in
``dblp.lossnet``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import kernels
from .wire import (
    DEFAULT_MAX_PAYLOAD,
    HEADER,
    ControlKind,
    ControlMessage,
    MetadataAnnouncement,
    WireError,
    chunk_count,
    decode_chunk,
)


class TransportError(Exception):
    pass


class ControlTimeout(TransportError):
    """The peer went silent on the reliable channel."""


class ChannelClosed(TransportError):
    pass


class LengthMismatch(TransportError):
    """Buffer size disagrees with the announced tensor layout."""


class DataChannel(Protocol):
    def send(self, datagram: bytes) -> None: ...

    def recv(self, timeout: float | None) -> bytes | None: ...


class ControlChannel(Protocol):
    def send(self, msg: ControlMessage) -> None: ...

    def recv(self, timeout: float | None) -> ControlMessage | None: ...


def required_chunks(total: int, tolerance: float) -> int:
    """Smallest received count whose missing ratio is at most ``tolerance``."""
    if not 0.0 <= tolerance < 1.0:
        raise ValueError(f"tolerance must lie in [0, 1), got {tolerance}")
    # (1 - 0.408) * 1000 evaluates to 592.0000000000001
    return max(1, math.ceil(round((1.0 - tolerance) * total, 9)))


class ChunkBitmap:
    """Received/missing flags for one round, one byte per chunk."""

    def __init__(self, total: int, flags: np.ndarray | None = None):
        if total <= 0:
            raise ValueError("a round needs at least one chunk")
        self.total = total
        self.flags = np.zeros(total, dtype=np.uint8) if flags is None else flags
        self.count = int(np.count_nonzero(self.flags))

    def set(self, seq: int) -> bool:
        if self.flags[seq]:
            return False
        self.flags[seq] = 1
        self.count += 1
        return True

    def __contains__(self, seq: int) -> bool:
        return bool(self.flags[seq])

    @property
    def missing_ratio(self) -> float:
        return (self.total - self.count) / self.total

    def missing(self) -> np.ndarray:
        return np.flatnonzero(self.flags == 0)

    def to_bytes(self) -> bytes:
        return np.packbits(self.flags).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, total: int) -> ChunkBitmap:
        if len(data) != (total + 7) // 8:
            raise WireError(f"bitmap of {len(data)} bytes for {total} chunks")
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=total)
        return cls(total, bits.astype(np.uint8))

    def copy(self) -> ChunkBitmap:
        return ChunkBitmap(self.total, self.flags.copy())


def bitmap_missing_ratio(b: ChunkBitmap) -> float:
    return b.missing_ratio


@dataclass
class SendOutcome:
    passes: int
    early_stop: bool
    datagrams: int


@dataclass
class RecvOutcome:
    buffer: bytes
    received: int
    total: int
    stale: int = 0
    duplicates: int = 0
    invalid: int = 0

    @property
    def received_ratio(self) -> float:
        return self.received / self.total


class Sender:
    """Sending side of one round.

    A pass transmits every chunk the latest bitmap does not mark received.
    Bitmaps arriving mid-pass take effect at the next pass boundary; a Stop
    takes effect before the next datagram.
    """

    def __init__(self, data: bytes, round: int, max_payload: int = DEFAULT_MAX_PAYLOAD, *, keep_log: bool = False):
        self.data = memoryview(bytes(data))
        self.round = round
        self.max_payload = max_payload
        self.total = chunk_count(len(self.data), max_payload)
        self.acked = ChunkBitmap(self.total)
        self.passes = 0
        self.datagrams = 0
        self.stopped = False
        self.early_stop = False
        # (plan, bitmap flags it was derived from) per pass, for invariant checks
        self.log: list[tuple[np.ndarray, np.ndarray]] | None = [] if keep_log else None

    def plan_pass(self) -> np.ndarray:
        plan = self.acked.missing()
        self.passes += 1
        if self.log is not None:
            self.log.append((plan, self.acked.flags.copy()))
        return plan

    def payload(self, seq: int) -> memoryview:
        off = seq * self.max_payload
        return self.data[off:off + self.max_payload]

    def datagram(self, seq: int) -> bytes:
        payload = self.payload(seq)
        return HEADER.pack(seq, self.round, len(payload)) + payload

    def on_control(self, msg: ControlMessage) -> bool:
        """Apply a reply; True if it was a Bitmap or Stop for this round."""
        if msg.round != self.round:
            return False
        if msg.kind == ControlKind.STOP:
            self.stopped = True
            return True
        if msg.kind == ControlKind.BITMAP:
            latest = ChunkBitmap.from_bytes(msg.bitmap, self.total)
            # replies can only grow within a round; keep the union
            np.maximum(self.acked.flags, latest.flags, out=self.acked.flags)
            self.acked.count = int(np.count_nonzero(self.acked.flags))
            return True
        return False

    def outcome(self) -> SendOutcome:
        return SendOutcome(self.passes, self.early_stop, self.datagrams)


class Receiver:
    """Receiving side of one round; unreceived regions stay zero."""

    def __init__(self, round: int, total_chunks: int, nbytes: int, tolerance: float,
                 max_payload: int = DEFAULT_MAX_PAYLOAD):
        if chunk_count(nbytes, max_payload) != total_chunks:
            raise LengthMismatch(f"{nbytes} bytes do not make {total_chunks} chunks of {max_payload}")
        self.round = round
        self.tolerance = tolerance
        self.max_payload = max_payload
        self.nbytes = nbytes
        self.bitmap = ChunkBitmap(total_chunks)
        self.needed = required_chunks(total_chunks, tolerance)
        self.buffer = np.zeros(nbytes, dtype=np.uint8)
        self.stale = 0
        self.duplicates = 0
        self.invalid = 0
        self.stop_sent = False

    @property
    def satisfied(self) -> bool:
        return self.bitmap.count >= self.needed

    def _expected_length(self, seq: int) -> int:
        return min(self.max_payload, self.nbytes - seq * self.max_payload)

    def _maybe_stop(self) -> ControlMessage | None:
        if self.satisfied and not self.stop_sent:
            self.stop_sent = True
            return ControlMessage.stop(self.round)
        return None

    def accept(self, seq: int, round: int, payload) -> ControlMessage | None:
        if self.stop_sent:
            return None
        if round != self.round:
            self.stale += 1
            return None
        if seq >= self.bitmap.total or len(payload) != self._expected_length(seq):
            self.invalid += 1
            return None
        if not self.bitmap.set(seq):
            self.duplicates += 1
            return None
        off = seq * self.max_payload
        self.buffer[off:off + len(payload)] = np.frombuffer(payload, dtype=np.uint8)
        return self._maybe_stop()

    def on_datagram(self, datagram: bytes) -> ControlMessage | None:
        try:
            chunk = decode_chunk(datagram)
        except WireError:
            self.invalid += 1
            return None
        return self.accept(chunk.header.seq, chunk.header.round, chunk.payload)

    def ingest_batch(self, seqs: np.ndarray, rounds: np.ndarray, source) -> int:
        """Accept a batch of arrivals whose payloads are slices of ``source``.

        Returns the index of the datagram that satisfied the threshold, or -1.
        Datagrams after that index are left unprocessed.
        """
        if self.stop_sent or len(seqs) == 0:
            return -1
        accepted = np.zeros(len(seqs), dtype=np.uint8)
        count, stop_idx, stale, dup, invalid = kernels.ingest(
            self.bitmap.flags, seqs, rounds, self.round, self.bitmap.count, self.needed, accepted
        )
        self.bitmap.count = count
        self.stale += stale
        self.duplicates += dup
        self.invalid += invalid
        self._copy_payloads(seqs[accepted.astype(bool)], source)
        if stop_idx >= 0:
            self.stop_sent = True
        return stop_idx

    def _copy_payloads(self, seqs: np.ndarray, source) -> None:
        if len(seqs) == 0:
            return
        src = np.frombuffer(source, dtype=np.uint8)
        p = self.max_payload
        n_full = self.nbytes // p
        full = seqs[seqs < n_full]
        if len(full):
            self.buffer[: n_full * p].reshape(n_full, p)[full] = src[: n_full * p].reshape(n_full, p)[full]
        if n_full < self.bitmap.total and np.any(seqs == n_full):
            self.buffer[n_full * p:] = src[n_full * p:]

    def on_control(self, msg: ControlMessage) -> ControlMessage | None:
        if msg.kind != ControlKind.PROBE or msg.round != self.round or self.stop_sent:
            return None
        return self._maybe_stop() or ControlMessage.with_bitmap(self.round, self.bitmap.to_bytes())

    def outcome(self) -> RecvOutcome:
        return RecvOutcome(
            self.buffer.tobytes(), self.bitmap.count, self.bitmap.total,
            self.stale, self.duplicates, self.invalid,
        )


def dblp_send(data: bytes, round: int, data_channel: DataChannel, control_channel: ControlChannel, *,
              max_payload: int = DEFAULT_MAX_PAYLOAD, probe_timeout: float = 0.2,
              max_probe_retries: int = 25) -> SendOutcome:
    sender = Sender(data, round, max_payload)

    def drain():
        while (msg := control_channel.recv(0)) is not None:
            sender.on_control(msg)

    while True:
        for seq in sender.plan_pass().tolist():
            drain()
            if sender.stopped:
                sender.early_stop = True
                return sender.outcome()
            data_channel.send(sender.datagram(seq))
            sender.datagrams += 1
        for _ in range(max_probe_retries + 1):
            control_channel.send(ControlMessage.probe(round))
            deadline = time.monotonic() + probe_timeout
            answered = False
            while not answered and (left := deadline - time.monotonic()) > 0:
                msg = control_channel.recv(left)
                if msg is not None:
                    answered = sender.on_control(msg)
            if sender.stopped:
                return sender.outcome()
            if answered:
                break
        else:
            raise ControlTimeout(f"no reply to {max_probe_retries + 1} probes in round {round}")


def dblp_recv(round: int, tolerance: float, data_channel: DataChannel, control_channel: ControlChannel, *,
              total_chunks: int, nbytes: int, max_payload: int = DEFAULT_MAX_PAYLOAD,
              recv_timeout: float = 30.0, poll_interval: float = 0.001) -> RecvOutcome:
    rx = Receiver(round, total_chunks, nbytes, tolerance, max_payload)
    last_activity = time.monotonic()
    while True:
        progressed = False
        datagram = data_channel.recv(poll_interval)
        while datagram is not None:
            progressed = True
            reply = rx.on_datagram(datagram)
            if reply is not None:
                control_channel.send(reply)
                return rx.outcome()
            datagram = data_channel.recv(0)
        while (msg := control_channel.recv(0)) is not None:
            progressed = True
            reply = rx.on_control(msg)
            if reply is not None:
                control_channel.send(reply)
                if reply.kind == ControlKind.STOP:
                    return rx.outcome()
        now = time.monotonic()
        if progressed:
            last_activity = now
        elif now - last_activity > recv_timeout:
            raise ControlTimeout(f"no chunk or probe for {recv_timeout}s in round {round}")


def reconstruct(buffer: bytes, layout: MetadataAnnouncement | tuple) -> dict[str, np.ndarray]:
    """Split a flat little-endian float32 buffer into named tensors."""
    pairs = layout.layout if isinstance(layout, MetadataAnnouncement) else tuple(layout)
    need = 4 * sum(c for _, c in pairs)
    if len(buffer) != need:
        raise LengthMismatch(f"buffer holds {len(buffer)} bytes, layout needs {need}")
    flat = np.frombuffer(buffer, dtype="<f4")
    out = {}
    off = 0
    for name, count in pairs:
        out[name] = flat[off:off + count].astype(np.float32)
        off += count
    return out
