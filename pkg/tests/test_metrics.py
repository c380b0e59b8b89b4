import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dblp.metrics import (
    Direction,
    EmptyRecords,
    MetricsCollector,
    RoundMetrics,
    cdf,
    read_csv,
    summarize,
    to_csv,
    write_csv,
)


def rec(lat, rnd=0, burst=False, wid=0, direction=Direction.W2S):
    return RoundMetrics(rnd, wid, direction, lat, 1, 0.4, False, burst, 10, 6)


def test_summary_basic():
    s = summarize([rec(1.0), rec(2.0), rec(3.0)])
    assert s.average == 2.0 and s.tail == 3.0 and s.count == 3


def test_burst_speedup_ratio():
    base = [rec(0.1, 1), rec(2.1629, 279, True)]
    ours = [rec(0.1, 1), rec(0.4621, 279, True)]
    s = summarize(ours, base)
    assert round(s.speedups["burst@279"], 2) == 4.68


def test_identical_runs_speedup_one():
    rs = [rec(0.5, 1), rec(1.5, 2, True)]
    s = summarize(rs, rs)
    assert set(s.speedups.values()) == {1.0}


def test_empty():
    with pytest.raises(EmptyRecords):
        summarize([])
    with pytest.raises(EmptyRecords):
        cdf([])


lat = st.floats(1e-6, 10.0)


@given(st.lists(lat, min_size=1, max_size=60), st.randoms())
def test_summary_permutation_invariant(xs, rnd):
    rs = [rec(x, i, i % 7 == 0) for i, x in enumerate(xs)]
    shuffled = list(rs)
    rnd.shuffle(shuffled)
    assert summarize(rs).to_dict() == summarize(shuffled).to_dict()
    s = summarize(rs)
    assert s.tail >= s.average - 1e-12


def test_cdf_examples():
    assert cdf([2.0, 1.0, 3.0]) == [(1.0, 1 / 3), (2.0, 2 / 3), (3.0, 1.0)]
    assert cdf([rec(4.0)] * 5) == [(4.0, 1.0)]


@given(st.lists(lat, min_size=1, max_size=80))
def test_cdf_monotone(xs):
    pts = cdf(xs)
    assert pts[-1] == (max(xs), 1.0)
    assert all(a[0] < b[0] and a[1] < b[1] for a, b in zip(pts, pts[1:]))


records = st.builds(
    RoundMetrics, st.integers(0, 2**40), st.integers(0, 64), st.sampled_from(list(Direction)),
    st.floats(1e-9, 1e3), st.integers(1, 100), st.floats(0, 0.99), st.booleans(), st.booleans(),
    st.integers(1, 10**6), st.integers(0, 10**6),
)


@given(rs=st.lists(records, max_size=20))
def test_csv_roundtrip(tmp_path_factory, rs):
    p = tmp_path_factory.mktemp("csv") / "m.csv"
    write_csv(p, rs)
    assert read_csv(p) == rs


def test_csv_header():
    text = to_csv([rec(0.25)])
    assert text.splitlines()[0] == ("round,worker_id,direction,latency_s,passes,tolerance,clr_active,burst,"
                                    "chunks_total,chunks_received")
    assert text.splitlines()[1] == "0,0,W2S,0.25,1,0.4,0,0,10,6"


def test_collector_orders_records():
    c = MetricsCollector()
    c.append(rec(1, 1, wid=1, direction=Direction.S2W))
    c.append(rec(1, 1, wid=2))
    c.append(rec(1, 0, wid=0))
    assert [(r.round, r.direction, r.worker_id) for r in c.records] == [
        (0, Direction.W2S, 0), (1, Direction.W2S, 2), (1, Direction.S2W, 1)]


def test_summary_text_and_json():
    s = summarize([rec(1.0, 3, True), rec(2.0)], [rec(4.0, 3, True), rec(2.0)])
    assert "burst@3" in s.to_text()
    assert '"3"' in s.to_json()
    assert math.isclose(s.speedups["average"], 2.0)
