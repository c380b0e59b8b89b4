import threading
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dblp.allreduce import server_handshake, worker_handshake
from dblp.lossnet import control_pair
from dblp.wire import (
    DEFAULT_MAX_PAYLOAD,
    HEADER_SIZE,
    MAX_DATAGRAM_BYTES,
    ChunkHeader,
    ControlKind,
    ControlMessage,
    FrameReader,
    GradientChunk,
    MetadataAnnouncement,
    TruncatedPacket,
    UnknownKind,
    WireError,
    chunk_count,
    decode_chunk,
    decode_control,
    decode_metadata,
    decode_notice,
    encode_chunk,
    encode_control,
    encode_metadata,
    encode_notice,
    flatten,
    frame,
    split_buffer,
)

FIX = Path(__file__).parent / "fixtures"


def golden():
    return dict(line.split() for line in (FIX / "wire_golden.txt").read_text().splitlines())


def test_header_layout():
    assert HEADER_SIZE == 14
    assert HEADER_SIZE + DEFAULT_MAX_PAYLOAD <= MAX_DATAGRAM_BYTES
    assert DEFAULT_MAX_PAYLOAD % 4 == 0


def test_golden_chunks():
    g = golden()
    assert encode_chunk(GradientChunk.make(1, 2, b"\x01\x02")).hex() == g["chunk_small"]
    assert encode_chunk(GradientChunk.make(0xFFFFFFFF, 2**64 - 1, b"")).hex() == g["chunk_max_fields"]
    assert encode_chunk(GradientChunk.make(7, 300, flatten([[1.0, -2.5]]))).hex() == g["chunk_float"]


def test_golden_control():
    g = golden()
    assert encode_control(ControlMessage.probe(5)).hex() == g["probe"]
    assert encode_control(ControlMessage.stop(2**40)).hex() == g["stop"]
    assert encode_control(ControlMessage.with_bitmap(9, bytes([0xA0, 0x01]))).hex() == g["bitmap"]
    assert frame(encode_control(ControlMessage.probe(1))).hex() == g["framed_probe"]


def test_decode_golden_back():
    g = golden()
    c = decode_chunk(bytes.fromhex(g["chunk_float"]))
    assert (c.header.seq, c.header.round, c.header.length) == (7, 300, 8)
    assert np.frombuffer(c.payload, "<f4").tolist() == [1.0, -2.5]
    m = decode_control(bytes.fromhex(g["bitmap"]))
    assert m.kind == ControlKind.BITMAP and m.round == 9 and m.bitmap == b"\xa0\x01"


def test_header_range_checks():
    with pytest.raises(ValueError):
        ChunkHeader(2**32, 0, 0)
    with pytest.raises(ValueError):
        ChunkHeader(0, -1, 0)
    with pytest.raises(ValueError):
        GradientChunk(ChunkHeader(0, 0, 3), b"ab")


def test_truncated_and_trailing():
    data = encode_chunk(GradientChunk.make(3, 4, b"abcd"))
    with pytest.raises(TruncatedPacket):
        decode_chunk(data[:10])
    with pytest.raises(TruncatedPacket):
        decode_chunk(data[:-1])
    with pytest.raises(WireError):
        decode_chunk(data + b"x")


def test_control_errors():
    with pytest.raises(UnknownKind):
        decode_control(bytes([9]) + bytes(12))
    with pytest.raises(WireError):
        decode_control(b"\x01\x00")
    # probe with a bitmap is malformed
    with pytest.raises(WireError):
        decode_control(bytes.fromhex("0100000000000000050000000100"))
    with pytest.raises(ValueError):
        ControlMessage(ControlKind.STOP, 1, b"\x00")
    with pytest.raises(ValueError):
        ControlMessage(ControlKind.BITMAP, 1)


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1), st.binary(max_size=DEFAULT_MAX_PAYLOAD))
def test_chunk_roundtrip(seq, rnd, payload):
    c = GradientChunk.make(seq, rnd, payload)
    enc = encode_chunk(c)
    assert len(enc) == HEADER_SIZE + len(payload)
    assert decode_chunk(enc) == c


@given(st.sampled_from(list(ControlKind)), st.integers(0, 2**64 - 1), st.binary(max_size=64))
def test_control_roundtrip(kind, rnd, bitmap):
    msg = ControlMessage(kind, rnd, bitmap if kind == ControlKind.BITMAP else None)
    assert decode_control(encode_control(msg)) == msg


@given(st.lists(st.binary(max_size=50), max_size=8), st.integers(1, 7))
def test_frame_reader_any_split(bodies, step):
    stream = b"".join(frame(b) for b in bodies)
    r = FrameReader()
    out = []
    for i in range(0, len(stream), step):
        out += r.feed(stream[i:i + step])
    assert out == bodies and r.pending_bytes == 0


@given(st.binary(min_size=1, max_size=5000), st.integers(1, 400))
def test_split_buffer_shape(data, payload):
    chunks = split_buffer(data, 3, payload)
    assert len(chunks) == chunk_count(len(data), payload)
    assert all(c.header.length == payload for c in chunks[:-1])
    assert 0 < chunks[-1].header.length <= payload
    assert b"".join(c.payload for c in chunks) == data
    assert [c.header.seq for c in chunks] == list(range(len(chunks)))


def test_metadata_total_chunks():
    ann = MetadataAnnouncement.for_layout((("a", 10), ("b", 6)), 32)
    assert ann.total_chunks == 2
    assert ann.nbytes == 64


@given(st.lists(st.tuples(st.from_regex(r"[a-z_.0-9]{1,12}", fullmatch=True), st.integers(0, 2**40)), max_size=6))
def test_metadata_roundtrip(layout):
    ann = MetadataAnnouncement.for_layout(layout, 1384, worker_id=2)
    back = decode_metadata(encode_metadata(ann))
    assert back == ann and back.extras == {"worker_id": "2"}


def test_metadata_rejects_bad_names():
    with pytest.raises(ValueError):
        MetadataAnnouncement(1, (("has space", 1),))
    with pytest.raises(WireError):
        decode_metadata(b"tensor a 1\n")


def test_notice_roundtrip():
    kind, f = decode_notice(encode_notice("tolerance", round=3, p=repr(0.408)))
    assert kind == "tolerance" and f == {"round": "3", "p": "0.408"}


def test_golden_handshake_transcript():
    expected = [line.split() for line in (FIX / "handshake.txt").read_text().splitlines()]
    log = []

    class Rec:
        def __init__(self, inner, tag):
            self.inner, self.tag = inner, tag

        def send_text(self, body):
            log.append([self.tag, frame(body).hex()])
            self.inner.send_text(body)

        def recv_text(self, timeout=None):
            return self.inner.recv_text(timeout)

    a, b = control_pair()
    layout = (("w", 10), ("b", 6))
    ann = MetadataAnnouncement.for_layout(layout, 32, payload_bytes=32, worker_id=0, data_port=40000)
    got = {}
    t = threading.Thread(target=lambda: got.setdefault("ann", worker_handshake(Rec(b, "W"), layout, 32, 40001)))
    t.start()
    ack = server_handshake(Rec(a, "S"), ann)
    t.join()
    assert log == expected
    assert ack["data_port"] == "40001"
    assert got["ann"] == ann and got["ann"].total_chunks == 2
