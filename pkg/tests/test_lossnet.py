import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dblp.lossnet import (
    DelayModel,
    LinkTiming,
    LossPlanner,
    LossSchedule,
    SimulatedDatagramChannel,
    VirtualLink,
    effective_loss,
)
from dblp.transport import Sender

M = (1 << 64) - 1


def sm(z):
    z = (z + 0x9E3779B97F4A7C15) & M
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M
    return z ^ (z >> 31)


def iid_drop_ref(seed, link, rnd, counter, rate):
    k = sm(seed)
    for w in (link, rnd, 0x4C4F5353):
        k = sm(k ^ w)
    return ((sm(k ^ counter) >> 11) * 2.0**-53) < rate


def pass_oracle(loss, p):
    t = 1
    while loss**t > p + 1e-12:
        t += 1
    return t


def test_golden_burst_delivery():
    s = LossSchedule(0.01, ((50, 0.7),), seed=2024)
    p = LossPlanner(s)
    assert int((~p.drops(50, 0, np.arange(10000), None, None)).sum()) == 2999
    assert int((~p.drops(49, 0, np.arange(10000), None, None)).sum()) == 9891


@settings(max_examples=50)
@given(st.integers(0, 2**63), st.integers(0, 7), st.integers(0, 10**6), st.floats(0.01, 0.99))
def test_iid_drops_match_reference(seed, link, rnd, rate):
    p = LossPlanner(LossSchedule(rate, seed=seed), link_id=link)
    got = p.drops(rnd, 100, np.arange(64), None, None).tolist()
    assert got == [iid_drop_ref(seed, link, rnd, 100 + i, rate) for i in range(64)]


def test_effective_loss():
    s = LossSchedule(0.05, ((10, 0.7),))
    assert effective_loss(s, 10) == 0.7 and effective_loss(s, 11) == 0.05
    assert s.burst_rounds == {10}


@pytest.mark.parametrize("bad", [dict(base_loss=1.0), dict(base_loss=-0.1), dict(bursts=((1, 0.5), (1, 0.6))),
                                 dict(model="pareto")])
def test_schedule_validation(bad):
    with pytest.raises(ValueError):
        LossSchedule(**bad)


def test_delay_validation():
    with pytest.raises(ValueError):
        DelayModel(fixed_delay=-1)


@pytest.mark.parametrize("loss", [0.05, 0.3, 0.5, 0.7])
@pytest.mark.parametrize("p", [0.008, 0.024, 0.1, 0.408, 0.424])
def test_stratified_pass_counts(loss, p):
    link = VirtualLink(LossSchedule(0.0, ((3, loss),), seed=11, model="stratified"))
    data = bytes(1000 * 1384)
    tr = link.transfer(data, 3, p)
    assert tr.send.passes == pass_oracle(loss, p)
    assert tr.recv.received >= math.ceil((1 - p) * 1000 - 1e-9)


def test_stratified_missing_count_per_pass():
    total, loss = 1000, 0.7
    pl = LossPlanner(LossSchedule(loss, seed=5, model="stratified"))
    alive = np.ones(total, dtype=bool)
    for t in range(1, 6):
        seqs = np.flatnonzero(alive)
        dropped = pl.drops(0, 0, seqs, np.full(len(seqs), t), total)
        alive[seqs[~dropped]] = False
        assert alive.sum() == math.ceil(round(total * loss**t, 9))


def test_virtual_link_deterministic():
    def run():
        link = VirtualLink(LossSchedule(0.1, ((1, 0.6),), seed=9), DelayModel(50e-6, jitter=30e-6), link_id=3)
        out = []
        t = 0.0
        for r in range(4):
            tr = link.transfer(bytes(range(256)) * 40, r, 0.05, t, max_payload=64)
            t = tr.stop_at_sender
            out.append((tr.send.passes, tr.recv.received, tr.recv.stale, tr.recv.buffer, tr.latency))
        return out

    assert run() == run()


def test_virtual_link_lossless_timing():
    link = VirtualLink(timing=LinkTiming(20e-6, 50e-6))
    tr = link.transfer(bytes(10 * 64), 0, 0.0, 1.0, max_payload=64)
    # last datagram leaves at 1 + 9*20us and lands 50us later; Stop takes 50us back
    assert tr.stop_at_receiver == pytest.approx(1.0 + 9 * 20e-6 + 50e-6)
    assert tr.latency == pytest.approx(9 * 20e-6 + 100e-6)
    assert tr.send.passes == 1 and not tr.send.early_stop


def test_early_stop_skips_rest_of_pass():
    link = VirtualLink(timing=LinkTiming(20e-6, 50e-6), delay=DelayModel(fixed_delay=0.0))
    tr = link.transfer(bytes(1000 * 64), 0, 0.5, max_payload=64)
    assert tr.send.early_stop
    # Stop lands 50us after the 500th arrival, by which time two more datagrams left
    assert tr.send.datagrams == 502
    assert link.in_flight == 2


def test_simulated_channel_counts_and_order():
    ch = SimulatedDatagramChannel(LossSchedule(0.5, seed=1), DelayModel(0.0))
    snd = Sender(bytes(64 * 100), 0, 64)
    kept = [ch.channel_send(snd.datagram(s), 0) for s in range(100)]
    assert ch.sent == 100 and ch.dropped == kept.count(False)
    got = []
    while (d := ch.recv(0.01)) is not None:
        got.append(d)
    assert len(got) == kept.count(True)
    ch2 = SimulatedDatagramChannel(LossSchedule(0.5, seed=1), DelayModel(0.0))
    assert [ch2.channel_send(snd.datagram(s), 0) for s in range(100)] == kept
