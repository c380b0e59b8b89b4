"""Centralized all-reduce: gather, mean, tolerance update, broadcast.

The same ``Coordinator`` drives both the in-process virtual-time cluster
(``SimulatedCluster``) and the socket deployment (``serve`` / ``run_worker``).
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .clr import FixedTolerance, ToleranceSchedule, l2_norm
from .lossnet import (
    DelayModel,
    LinkTiming,
    LossSchedule,
    StreamControlChannel,
    UdpDataChannel,
    VirtualLink,
)
from .metrics import Direction, MetricsCollector, RoundMetrics
from .transport import ChannelClosed, TransportError, dblp_recv, dblp_send, reconstruct
from .wire import (
    DEFAULT_MAX_PAYLOAD,
    MetadataAnnouncement,
    decode_metadata,
    decode_notice,
    encode_metadata,
    encode_notice,
    flatten,
)

log = logging.getLogger(__name__)


class LayoutMismatch(Exception):
    pass


class WorkerLost(RuntimeError):
    pass


class ServerLost(RuntimeError):
    pass


def reduce_mean(gradients) -> list[np.ndarray]:
    """Element-wise mean over workers, summed in worker order then divided by N."""
    if not gradients:
        raise ValueError("no gradients to reduce")
    shapes = [tuple(np.shape(t) for t in g) for g in gradients]
    if any(s != shapes[0] for s in shapes):
        raise LayoutMismatch(f"workers disagree on tensor shapes: {shapes}")
    n = np.float32(len(gradients))
    out = []
    for parts in zip(*gradients):
        acc = np.array(parts[0], dtype=np.float32, copy=True)
        for t in parts[1:]:
            acc += np.asarray(t, dtype=np.float32)
        acc /= n
        out.append(acc)
    return out


@dataclass
class StepResult:
    mean_gradient: list[np.ndarray]
    active_tolerance: float
    round: int
    clr_active: bool


class Coordinator:
    """Owns the tolerance policy and the per-step mean.

    Worker-to-server transfers of step ``r`` use the tolerance decided after
    step ``r - 1`` (``p_low`` before step 0); the broadcast of step ``r``
    uses the tolerance decided from step ``r``'s mean.
    """

    def __init__(self, n_workers: int, policy: ToleranceSchedule | FixedTolerance):
        self.n_workers = n_workers
        self.policy = policy
        self.w2s_tolerance = policy.active
        self.w2s_clr = policy.in_clr
        self.grads: list = [None] * n_workers
        self.result: StepResult | None = None

    def reduce(self, step: int, grads=None) -> StepResult:
        mean = reduce_mean(self.grads if grads is None else grads)
        tol = self.policy.advance(step, l2_norm(mean))
        self.result = StepResult(mean, tol, step, self.policy.in_clr)
        self.w2s_tolerance = tol
        self.w2s_clr = self.policy.in_clr
        self.grads = [None] * self.n_workers
        return self.result


@dataclass
class ClusterRun:
    records: list[RoundMetrics]
    steps: int
    results: list[StepResult] = field(default_factory=list)


class SimulatedCluster:
    """Server and N workers in one process over ``VirtualLink`` pairs.

    Fully deterministic: timing is virtual and every loss decision comes from
    the schedule seed.
    """

    def __init__(self, workers, policy, *, loss: LossSchedule = LossSchedule(),
                 delay: DelayModel = DelayModel(fixed_delay=50e-6), timing: LinkTiming = LinkTiming(),
                 max_payload: int = DEFAULT_MAX_PAYLOAD, compute_time: float = 0.0, keep_results: bool = False):
        self.workers = list(workers)
        layouts = {tuple(w.layout) for w in self.workers}
        if len(layouts) != 1:
            raise LayoutMismatch("workers disagree on the model layout")
        self.announcement = MetadataAnnouncement.for_layout(self.workers[0].layout, max_payload)
        if self.announcement.element_count == 0:
            raise LayoutMismatch("empty model")
        self.layout = self.announcement.layout
        self.coordinator = Coordinator(len(self.workers), policy)
        self.loss = loss
        self.max_payload = max_payload
        self.compute_time = compute_time
        self.up = [VirtualLink(loss, delay, timing, link_id=2 * i) for i in range(len(self.workers))]
        self.down = [VirtualLink(loss, delay, timing, link_id=2 * i + 1) for i in range(len(self.workers))]
        self.clock = [0.0] * len(self.workers)
        self.collector = MetricsCollector()
        self.keep_results = keep_results
        self.results: list[StepResult] = []

    def _tensors(self, buffer: bytes) -> list[np.ndarray]:
        return list(reconstruct(buffer, self.layout).values())

    def step(self, r: int) -> StepResult:
        coord = self.coordinator
        tol, clr = coord.w2s_tolerance, coord.w2s_clr
        burst = r in self.loss.burst_rounds
        total = self.announcement.total_chunks
        grads, arrived = [], []
        for i, w in enumerate(self.workers):
            data = flatten(w.gradient(r))
            tr = self.up[i].transfer(data, r, tol, self.clock[i] + self.compute_time, max_payload=self.max_payload)
            grads.append(self._tensors(tr.recv.buffer))
            arrived.append(tr.stop_at_receiver)
            self.collector.append(RoundMetrics(r, i, Direction.W2S, tr.latency, tr.send.passes, tol, clr, burst,
                                               total, tr.recv.received))
        result = coord.reduce(r, grads)
        barrier = max(arrived)
        mean = flatten(result.mean_gradient)
        for i, w in enumerate(self.workers):
            tr = self.down[i].transfer(mean, r, result.active_tolerance, barrier, max_payload=self.max_payload)
            w.apply(self._tensors(tr.recv.buffer))
            self.clock[i] = tr.stop_at_receiver
            self.collector.append(RoundMetrics(r, i, Direction.S2W, tr.latency, tr.send.passes,
                                               result.active_tolerance, result.clr_active, burst, total,
                                               tr.recv.received))
        if self.keep_results:
            self.results.append(result)
        return result

    def run(self, steps: int) -> ClusterRun:
        for r in range(steps):
            self.step(r)
        return ClusterRun(self.collector.records, steps, self.results)


# -- socket deployment -------------------------------------------------------

def server_handshake(ctrl, ann: MetadataAnnouncement, timeout: float = 30.0) -> dict[str, str]:
    """Send the announcement and wait for the worker's acknowledgement."""
    ctrl.send_text(encode_metadata(ann))
    body = ctrl.recv_text(timeout)
    if body is None:
        raise TransportError("worker did not acknowledge the metadata")
    kind, fields = decode_notice(body)
    if kind != "ack":
        raise LayoutMismatch(f"worker rejected metadata: {body.decode().strip()}")
    if int(fields["total_chunks"]) != ann.total_chunks:
        raise LayoutMismatch("worker acknowledged a different chunk count")
    return fields


def worker_handshake(ctrl, layout, max_payload: int, data_port: int, timeout: float = 30.0) -> MetadataAnnouncement:
    """Receive the announcement, check it against the local model and acknowledge."""
    body = ctrl.recv_text(timeout)
    if body is None:
        raise TransportError("no metadata from server")
    ann = decode_metadata(body)
    mine = MetadataAnnouncement.for_layout(layout, max_payload)
    if ann.layout != mine.layout or ann.total_chunks != mine.total_chunks:
        ctrl.send_text(encode_notice("reject", reason="layout"))
        raise LayoutMismatch(f"server layout {ann.layout} ({ann.total_chunks} chunks), "
                             f"local {mine.layout} ({mine.total_chunks} chunks)")
    ctrl.send_text(encode_notice("ack", total_chunks=ann.total_chunks, data_port=data_port))
    return ann


def _expect(ctrl, kind: str, step: int, timeout: float) -> dict[str, str]:
    body = ctrl.recv_text(timeout)
    if body is None:
        raise TransportError(f"timed out waiting for {kind} in round {step}")
    got, fields = decode_notice(body)
    if got != kind or int(fields["round"]) != step:
        raise TransportError(f"expected {kind} for round {step}, got {body!r}")
    return fields


@dataclass
class SocketOptions:
    max_payload: int = DEFAULT_MAX_PAYLOAD
    probe_timeout: float = 0.2
    max_probe_retries: int = 25
    recv_timeout: float = 30.0


@dataclass
class Session:
    worker_id: int
    ctrl: StreamControlChannel
    data: UdpDataChannel
    round: int = 0


def serve(listen: tuple[str, int], n_workers: int, steps: int, policy, layout, *,
          options: SocketOptions = SocketOptions(), ready: threading.Event | None = None,
          bound: list | None = None, burst_rounds=frozenset()) -> ClusterRun:
    """Run the server role until ``steps`` rounds complete on every session."""
    ann0 = MetadataAnnouncement.for_layout(layout, options.max_payload)
    if ann0.element_count == 0:
        raise LayoutMismatch("empty model")
    lsock = socket.create_server(listen)
    if bound is not None:
        bound.append(lsock.getsockname())
    if ready is not None:
        ready.set()
    sessions: list[Session] = []
    try:
        for i in range(n_workers):
            conn, addr = lsock.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            udp.bind((conn.getsockname()[0], 0))
            ctrl = StreamControlChannel(conn)
            ann = MetadataAnnouncement.for_layout(layout, options.max_payload, payload_bytes=options.max_payload,
                                                  worker_id=i, data_port=udp.getsockname()[1])
            ack = server_handshake(ctrl, ann, options.recv_timeout)
            sessions.append(Session(i, ctrl, UdpDataChannel(udp, (addr[0], int(ack["data_port"])))))
            log.info("worker %d connected from %s", i, addr)
    finally:
        lsock.close()

    coord = Coordinator(n_workers, policy)
    collector = MetricsCollector()
    results: list[StepResult] = []
    errors: list[BaseException] = []

    def reduce_action():
        step = sessions[0].round
        results.append(coord.reduce(step))

    barrier = threading.Barrier(n_workers, action=reduce_action)
    # all handlers must be done reading coord.result before the next reduce
    done = threading.Barrier(n_workers)
    ann = MetadataAnnouncement.for_layout(layout, options.max_payload)

    def handler(s: Session):
        try:
            for step in range(steps):
                s.round = step
                tol, clr = coord.w2s_tolerance, coord.w2s_clr
                rx = dblp_recv(step, tol, s.data, s.ctrl, total_chunks=ann.total_chunks, nbytes=ann.nbytes,
                               max_payload=options.max_payload, recv_timeout=options.recv_timeout)
                rep = _expect(s.ctrl, "report", step, options.recv_timeout)
                coord.grads[s.worker_id] = list(reconstruct(rx.buffer, ann).values())
                burst = step in burst_rounds
                collector.append(RoundMetrics(step, s.worker_id, Direction.W2S, float(rep["latency"]),
                                              int(rep["passes"]), tol, clr, burst, ann.total_chunks, rx.received))
                barrier.wait()
                res = coord.result
                s.ctrl.send_text(encode_notice("tolerance", round=step, p=repr(res.active_tolerance)))
                t0 = time.perf_counter()
                out = dblp_send(flatten(res.mean_gradient), step, s.data, s.ctrl, max_payload=options.max_payload,
                                probe_timeout=options.probe_timeout, max_probe_retries=options.max_probe_retries)
                latency = time.perf_counter() - t0
                got = _expect(s.ctrl, "received", step, options.recv_timeout)
                collector.append(RoundMetrics(step, s.worker_id, Direction.S2W, latency, out.passes,
                                              res.active_tolerance, res.clr_active, burst, ann.total_chunks,
                                              int(got["chunks"])))
                done.wait()
        except BaseException as e:  # noqa: BLE001 - surfaced as WorkerLost below
            errors.append(e)
            barrier.abort()
            done.abort()

    threads = [threading.Thread(target=handler, args=(s,), name=f"dblp-handler-{s.worker_id}") for s in sessions]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for s in sessions:
        s.ctrl.close()
        s.data.close()
    real = [e for e in errors if not isinstance(e, threading.BrokenBarrierError)]
    if errors:
        raise WorkerLost(f"a worker session failed: {(real or errors)[0]!r}") from (real or errors)[0]
    return ClusterRun(collector.records, steps, results)


@dataclass
class WorkerSession:
    worker_id: int
    ctrl: StreamControlChannel
    data: UdpDataChannel
    announcement: MetadataAnnouncement
    options: SocketOptions


def connect(address: tuple[str, int], layout, options: SocketOptions = SocketOptions(),
            timeout: float = 30.0) -> WorkerSession:
    conn = socket.create_connection(address, timeout=timeout)
    conn.settimeout(None)
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    udp.bind((conn.getsockname()[0], 0))
    ctrl = StreamControlChannel(conn)
    ann = worker_handshake(ctrl, layout, options.max_payload, udp.getsockname()[1], timeout)
    data = UdpDataChannel(udp, (address[0], int(ann.extras["data_port"])))
    return WorkerSession(int(ann.extras["worker_id"]), ctrl, data, ann, options)


def worker_step(workload, step: int, session: WorkerSession) -> float:
    """Compute, push the gradient, pull the mean, apply it. Returns the send latency."""
    o = session.options
    ann = session.announcement
    try:
        data = flatten(workload.gradient(step))
        t0 = time.perf_counter()
        out = dblp_send(data, step, session.data, session.ctrl, max_payload=o.max_payload,
                        probe_timeout=o.probe_timeout, max_probe_retries=o.max_probe_retries)
        latency = time.perf_counter() - t0
        session.ctrl.send_text(encode_notice("report", round=step, latency=repr(latency), passes=out.passes))
        tol = float(_expect(session.ctrl, "tolerance", step, o.recv_timeout)["p"])
        rx = dblp_recv(step, tol, session.data, session.ctrl, total_chunks=ann.total_chunks, nbytes=ann.nbytes,
                       max_payload=o.max_payload, recv_timeout=o.recv_timeout)
        session.ctrl.send_text(encode_notice("received", round=step, chunks=rx.received))
    except (TransportError, ChannelClosed, OSError) as e:
        raise ServerLost(f"round {step}: {e}") from e
    workload.apply(list(reconstruct(rx.buffer, ann).values()))
    return latency


def run_worker(address: tuple[str, int], layout, make_workload, steps: int,
               options: SocketOptions = SocketOptions()):
    """Connect, build the workload for the assigned worker id and train. Returns ``(worker_id, workload)``."""
    session = connect(address, layout, options)
    try:
        workload = make_workload(session.worker_id)
        for step in range(steps):
            worker_step(workload, step, session)
    finally:
        session.ctrl.close()
        session.data.close()
    return session.worker_id, workload
