"""Unreliable-channel backends and the deterministic lossy-network simulator.

Loss decisions come from a counter-based generator (SplitMix64 over
``stream_key(seed, link, round, purpose) ^ counter``) so that a drop depends
only on the schedule seed, the link, the round and the datagram's send
sequence number within that round. Two loss models are available:

``iid``
    each datagram is dropped independently with the round's loss rate.
``stratified``
    chunks of a round are ranked by a seeded permutation and chunk ``s`` is
    dropped on its ``t``-th transmission iff ``rank(s) < total * rate**t``.
    After ``t`` full passes exactly ``ceil(total * rate**t)`` chunks are
    missing, which makes pass counts match ``min{t : rate**t <= p}``.

Control traffic is never dropped.
"""

from __future__ import annotations

import heapq
import itertools
import select
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .transport import ChannelClosed, ControlMessage, Receiver, RecvOutcome, SendOutcome, Sender
from .wire import (
    DEFAULT_MAX_PAYLOAD,
    HEADER,
    FrameReader,
    decode_control,
    encode_control,
    frame,
    is_control_body,
)

LOSS_STREAM = 0x4C4F5353
JITTER_STREAM = 0x4A495454
RANK_STREAM = 0x52414E4B

LOSS_MODELS = ("iid", "stratified")


@dataclass(frozen=True)
class LossSchedule:
    base_loss: float = 0.0
    bursts: tuple[tuple[int, float], ...] = ()
    seed: int = 0
    model: str = "iid"

    def __post_init__(self):
        object.__setattr__(self, "bursts", tuple((int(r), float(x)) for r, x in self.bursts))
        rates = [self.base_loss] + [x for _, x in self.bursts]
        if any(not 0.0 <= x < 1.0 for x in rates):
            raise ValueError(f"loss rates must lie in [0, 1): {rates}")
        rounds = [r for r, _ in self.bursts]
        if len(set(rounds)) != len(rounds):
            raise ValueError(f"duplicate burst rounds: {rounds}")
        if self.model not in LOSS_MODELS:
            raise ValueError(f"unknown loss model {self.model!r}")

    @property
    def burst_rounds(self) -> frozenset[int]:
        return frozenset(r for r, _ in self.bursts)


def effective_loss(schedule: LossSchedule, round: int) -> float:
    for r, rate in schedule.bursts:
        if r == round:
            return rate
    return schedule.base_loss


@dataclass(frozen=True)
class DelayModel:
    fixed_delay: float = 0.0
    jitter: float = 0.0
    # (round, seq, extra_delay): applied to the first transmission only
    stragglers: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stragglers", tuple((int(r), int(s), float(d)) for r, s, d in self.stragglers))
        if self.fixed_delay < 0 or self.jitter < 0 or any(d < 0 for *_, d in self.stragglers):
            raise ValueError("delays must be non-negative")


class LossPlanner:
    """Drop and delay decisions for one directed link."""

    def __init__(self, schedule: LossSchedule, delay: DelayModel = DelayModel(), link_id: int = 0):
        self.schedule = schedule
        self.delay = delay
        self.link_id = link_id
        self._ranks: dict[int, np.ndarray] = {}
        self._stragglers = {(r, s): d for r, s, d in delay.stragglers}

    def ranks(self, round: int, total: int) -> np.ndarray:
        ranks = self._ranks.get(round)
        if ranks is None or len(ranks) != total:
            key = kernels.stream_key(self.schedule.seed, self.link_id, round, RANK_STREAM)
            order = np.argsort(kernels.hash_stream(key, 0, total), kind="stable")
            ranks = np.empty(total, dtype=np.int64)
            ranks[order] = np.arange(total)
            self._ranks = {round: ranks}
        return ranks

    def drops(self, round: int, counter: int, seqs: np.ndarray, attempts: np.ndarray | None,
              total: int | None) -> np.ndarray:
        """Boolean drop mask for datagrams with send numbers ``counter...``."""
        rate = effective_loss(self.schedule, round)
        if rate == 0.0:
            return np.zeros(len(seqs), dtype=bool)
        if self.schedule.model == "iid":
            key = kernels.stream_key(self.schedule.seed, self.link_id, round, LOSS_STREAM)
            return kernels.uniforms(key, counter, len(seqs)) < rate
        if total is None or attempts is None:
            raise ValueError("the stratified model needs chunk totals and attempt counts")
        ranks = self.ranks(round, total)
        safe = np.clip(seqs, 0, total - 1)
        return (ranks[safe] < total * rate ** attempts.astype(np.float64)) & (seqs < total)

    def delays(self, round: int, counter: int, seqs: np.ndarray, first: np.ndarray) -> np.ndarray:
        d = np.full(len(seqs), self.delay.fixed_delay)
        if self.delay.jitter:
            key = kernels.stream_key(self.schedule.seed, self.link_id, round, JITTER_STREAM)
            d += self.delay.jitter * kernels.uniforms(key, counter, len(seqs))
        if self._stragglers:
            for i, (s, f) in enumerate(zip(seqs.tolist(), first.tolist())):
                extra = self._stragglers.get((round, s))
                if extra is not None and f:
                    d[i] += extra
        return d


class SimulatedDatagramChannel:
    """In-process lossy datagram pipe delivering in wall-clock time.

    ``send`` reads the round from the chunk header; ``channel_send`` takes it
    explicitly. The send sequence number restarts at 0 whenever the round
    changes.
    """

    def __init__(self, schedule: LossSchedule = LossSchedule(), delay: DelayModel = DelayModel(), *,
                 link_id: int = 0, total_chunks: int | None = None):
        self.planner = LossPlanner(schedule, delay, link_id)
        self.total_chunks = total_chunks
        self._round = None
        self._counter = 0
        self._attempts: dict[int, int] = {}
        self._heap: list = []
        self._tiebreak = itertools.count()
        self._cv = threading.Condition()
        self._closed = False
        self.sent = 0
        self.dropped = 0

    def channel_send(self, datagram: bytes, current_round: int) -> bool:
        if self._closed:
            raise ChannelClosed("channel closed")
        if current_round != self._round:
            self._round, self._counter, self._attempts = current_round, 0, {}
        seq = HEADER.unpack_from(datagram)[0] if len(datagram) >= HEADER.size else -1
        attempt = self._attempts.get(seq, 0) + 1
        self._attempts[seq] = attempt
        seqs = np.array([seq], dtype=np.int64)
        dropped = bool(self.planner.drops(current_round, self._counter, seqs,
                                          np.array([attempt]), self.total_chunks)[0])
        delay = float(self.planner.delays(current_round, self._counter, seqs, np.array([attempt == 1]))[0])
        self._counter += 1
        self.sent += 1
        if dropped:
            self.dropped += 1
            return False
        with self._cv:
            heapq.heappush(self._heap, (time.monotonic() + delay, next(self._tiebreak), bytes(datagram)))
            self._cv.notify_all()
        return True

    def send(self, datagram: bytes) -> None:
        rnd = HEADER.unpack_from(datagram)[1] if len(datagram) >= HEADER.size else 0
        self.channel_send(datagram, rnd)

    def recv(self, timeout: float | None) -> bytes | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while True:
                now = time.monotonic()
                if self._heap and self._heap[0][0] <= now:
                    return heapq.heappop(self._heap)[2]
                if self._closed:
                    raise ChannelClosed("channel closed")
                wait = self._heap[0][0] - now if self._heap else None
                if deadline is not None:
                    if deadline - now <= 0:
                        return None
                    wait = deadline - now if wait is None else min(wait, deadline - now)
                self._cv.wait(wait)

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()


class QueueControlEndpoint:
    """One end of an in-process reliable channel; messages pass through the wire codec."""

    def __init__(self, cv: threading.Condition):
        self._cv = cv
        self.peer: QueueControlEndpoint | None = None
        self._reader = FrameReader()
        self._controls: deque[bytes] = deque()
        self._texts: deque[bytes] = deque()
        self.closed = False

    def _deliver(self, data: bytes) -> None:
        for body in self._reader.feed(data):
            (self._controls if is_control_body(body) else self._texts).append(body)

    def _put(self, body: bytes) -> None:
        with self._cv:
            if self.closed or self.peer.closed:
                raise ChannelClosed("reliable channel closed")
            self.peer._deliver(frame(body))
            self._cv.notify_all()

    def send(self, msg: ControlMessage) -> None:
        self._put(encode_control(msg))

    def send_text(self, body: bytes) -> None:
        self._put(body)

    def _wait(self, queue: deque, timeout: float | None) -> bytes | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cv:
            while not queue:
                if self.closed or self.peer.closed:
                    raise ChannelClosed("reliable channel closed")
                left = None if deadline is None else deadline - time.monotonic()
                if left is not None and left <= 0:
                    return None
                self._cv.wait(left)
            return queue.popleft()

    def recv(self, timeout: float | None) -> ControlMessage | None:
        body = self._wait(self._controls, timeout)
        return None if body is None else decode_control(body)

    def recv_text(self, timeout: float | None = None) -> bytes | None:
        return self._wait(self._texts, timeout)

    def close(self) -> None:
        with self._cv:
            self.closed = True
            self._cv.notify_all()


def control_pair() -> tuple[QueueControlEndpoint, QueueControlEndpoint]:
    cv = threading.Condition()
    a, b = QueueControlEndpoint(cv), QueueControlEndpoint(cv)
    a.peer, b.peer = b, a
    return a, b


class UdpDataChannel:
    """Real datagram socket backend. No artificial loss."""

    def __init__(self, sock: socket.socket, peer: tuple[str, int] | None = None):
        self.sock = sock
        self.peer = peer
        sock.setblocking(False)
        try:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 8 * 1024 * 1024)
        except OSError:
            pass

    def send(self, datagram: bytes) -> None:
        try:
            self.sock.sendto(datagram, self.peer)
        except BlockingIOError:
            # full send buffer behaves like a drop; retransmission covers it
            pass

    def recv(self, timeout: float | None) -> bytes | None:
        try:
            return self.sock.recv(65535)
        except BlockingIOError:
            pass
        if timeout == 0:
            return None
        ready, _, _ = select.select([self.sock], [], [], timeout)
        if not ready:
            return None
        try:
            return self.sock.recv(65535)
        except BlockingIOError:
            return None

    def close(self) -> None:
        self.sock.close()


class StreamControlChannel:
    """Reliable channel over a stream socket with length-prefixed frames.

    Control frames are returned by ``recv``; session text frames are queued
    separately and returned by ``recv_text``.
    """

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._reader = FrameReader()
        self._controls: list[ControlMessage] = []
        self._texts: list[bytes] = []
        self._send_lock = threading.Lock()

    def _send_body(self, body: bytes) -> None:
        with self._send_lock:
            try:
                self.sock.sendall(frame(body))
            except OSError as e:
                raise ChannelClosed(str(e)) from e

    def send(self, msg: ControlMessage) -> None:
        self._send_body(encode_control(msg))

    def send_text(self, body: bytes) -> None:
        self._send_body(body)

    def _pump(self, timeout: float | None) -> None:
        ready, _, _ = select.select([self.sock], [], [], timeout)
        if not ready:
            return
        try:
            data = self.sock.recv(1 << 20)
        except OSError as e:
            raise ChannelClosed(str(e)) from e
        if not data:
            raise ChannelClosed("peer closed the reliable channel")
        for body in self._reader.feed(data):
            if is_control_body(body):
                self._controls.append(decode_control(body))
            else:
                self._texts.append(body)

    def _wait(self, queue: list, timeout: float | None):
        deadline = None if timeout is None else time.monotonic() + timeout
        while not queue:
            left = None if deadline is None else max(0.0, deadline - time.monotonic())
            self._pump(left)
            if not queue and left == 0.0:
                return None
        return queue.pop(0)

    def recv(self, timeout: float | None) -> ControlMessage | None:
        return self._wait(self._controls, timeout)

    def recv_text(self, timeout: float | None = None) -> bytes | None:
        return self._wait(self._texts, timeout)

    def close(self) -> None:
        self.sock.close()


@dataclass(frozen=True)
class LinkTiming:
    """Virtual-time costs: per-datagram sender cost and reliable-channel one-way delay."""

    send_cost: float = 20e-6
    control_delay: float = 50e-6


@dataclass
class Transfer:
    send: SendOutcome
    recv: RecvOutcome
    start: float
    stop_at_receiver: float
    stop_at_sender: float
    # per-pass (plan, acknowledged flags) when the link keeps a log
    send_log: list | None = None

    @property
    def latency(self) -> float:
        return self.stop_at_sender - self.start


def _empty_inflight() -> dict[str, np.ndarray]:
    return {
        "t": np.empty(0), "seq": np.empty(0, dtype=np.int64), "rnd": np.empty(0, dtype=np.uint64),
        "pas": np.empty(0, dtype=np.int64), "k": np.empty(0, dtype=np.int64),
    }


@dataclass
class VirtualLink:
    """One directed link simulated in virtual time, a pass at a time.

    Datagrams still in flight when a round ends stay queued and reach the
    next round's receiver, which drops them as stale.
    """

    schedule: LossSchedule = field(default_factory=LossSchedule)
    delay: DelayModel = field(default_factory=lambda: DelayModel(fixed_delay=50e-6))
    timing: LinkTiming = field(default_factory=LinkTiming)
    link_id: int = 0
    keep_log: bool = False

    def __post_init__(self):
        self.planner = LossPlanner(self.schedule, self.delay, self.link_id)
        self._inflight = _empty_inflight()

    def transfer(self, data: bytes, round: int, tolerance: float, start: float = 0.0, *,
                 max_payload: int = DEFAULT_MAX_PAYLOAD) -> Transfer:
        sender = Sender(data, round, max_payload, keep_log=self.keep_log)
        rx = Receiver(round, sender.total, len(sender.data), tolerance, max_payload)
        total = sender.total
        c = self.timing.send_cost
        cd = self.timing.control_delay
        inf = self._inflight
        inf["t"] = np.maximum(inf["t"], start)
        attempts = np.zeros(total, dtype=np.int64)
        counter = 0
        t = start
        while True:
            plan = sender.plan_pass().astype(np.int64)
            m = len(plan)
            pnum = sender.passes
            send_t = t + c * np.arange(m)
            attempts[plan] += 1
            tries = attempts[plan]
            dropped = self.planner.drops(round, counter, plan, tries, total)
            delays = self.planner.delays(round, counter, plan, tries == 1)
            counter += m
            keep = ~dropped
            n_keep = int(keep.sum())
            inf = {
                "t": np.concatenate([inf["t"], send_t[keep] + delays[keep]]),
                "seq": np.concatenate([inf["seq"], plan[keep]]),
                "rnd": np.concatenate([inf["rnd"], np.full(n_keep, round, dtype=np.uint64)]),
                "pas": np.concatenate([inf["pas"], np.full(n_keep, pnum, dtype=np.int64)]),
                "k": np.concatenate([inf["k"], np.flatnonzero(keep)]),
            }
            order = np.argsort(inf["t"], kind="stable")
            inf = {k: v[order] for k, v in inf.items()}
            t_end = t + c * m
            probe_arrival = t_end + cd
            n_due = int(np.searchsorted(inf["t"], probe_arrival, side="right"))
            stop_idx = rx.ingest_batch(
                np.ascontiguousarray(inf["seq"][:n_due]), np.ascontiguousarray(inf["rnd"][:n_due]), sender.data
            )
            if stop_idx >= 0:
                stop_rx = float(inf["t"][stop_idx])
                stop_tx = stop_rx + cd
                sent = int(np.searchsorted(send_t, stop_tx, side="left"))
                sender.datagrams += sent
                sender.stopped = True
                sender.early_stop = sent < m
                rest = slice(stop_idx + 1, None)
                inf = {k: v[rest] for k, v in inf.items()}
                unsent = (inf["pas"] == pnum) & (inf["k"] >= sent) & (inf["rnd"] == round)
                self._inflight = {k: v[~unsent] for k, v in inf.items()}
                return Transfer(sender.outcome(), rx.outcome(), start, stop_rx, stop_tx, sender.log)
            sender.datagrams += m
            inf = {k: v[n_due:] for k, v in inf.items()}
            reply = rx.on_control(ControlMessage.probe(round))
            sender.on_control(reply)
            t = probe_arrival + cd

    @property
    def in_flight(self) -> int:
        return len(self._inflight["t"])
