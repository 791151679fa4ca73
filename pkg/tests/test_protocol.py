from __future__ import annotations

import socket
import threading

import pytest
from hypothesis import given, strategies as st

from elasticpf import protocol as pr
from elasticpf.errors import DecodeError, FrameError, ProtocolError, VersionError
from elasticpf.store import ParticleId

from messages import message_strategy, random_messages


@given(message_strategy())
def test_round_trip(msg):
    assert pr.decode(pr.encode(msg)) == msg


def test_round_trip_seeded_batch():
    for msg in random_messages(5000, seed=1):
        assert pr.decode(pr.encode(msg)) == msg


def test_weight_example():
    m = pr.Weight(3, ParticleId(2, 7), 0.125, (ParticleId(2, 7),), (ParticleId(0, 1),), sender="r")
    assert pr.decode(pr.encode(m)) == m


@given(message_strategy(), st.data())
def test_truncation_is_typed(msg, data):
    payload = pr.encode(msg)
    cut = data.draw(st.integers(0, len(payload) - 1))
    with pytest.raises(DecodeError):
        pr.decode(payload[:cut])


@given(st.binary(max_size=200))
def test_garbage_never_crashes(blob):
    try:
        pr.decode(blob)
    except ProtocolError:
        pass


@given(message_strategy(), st.data())
def test_bit_flips_never_crash(msg, data):
    payload = bytearray(pr.encode(msg))
    for _ in range(data.draw(st.integers(1, 4))):
        i = data.draw(st.integers(0, len(payload) - 1))
        payload[i] ^= 1 << data.draw(st.integers(0, 7))
    try:
        pr.decode(bytes(payload))
    except ProtocolError:
        pass


def test_version_mismatch():
    payload = bytearray(pr.encode(pr.Heartbeat(1)))
    payload[0] = 7
    with pytest.raises(VersionError):
        pr.decode(bytes(payload))


def test_unknown_type():
    with pytest.raises(DecodeError):
        pr.decode(bytes((pr.VERSION, 200, 0, 0)))


def test_trailing_bytes():
    with pytest.raises(DecodeError):
        pr.decode(pr.encode(pr.Heartbeat(1)) + b"\x00")


def test_oversize():
    with pytest.raises(FrameError):
        pr.encode(pr.Weight(0, (0, 0), 1.0, tuple((0, i) for i in range(140_000))))
    buf = pr.FrameBuffer()
    with pytest.raises(FrameError):
        list(buf.feed((pr.MAX_FRAME + 1).to_bytes(4, "big")))


def test_field_validation():
    with pytest.raises(FrameError):
        pr.Heartbeat(-1)
    with pytest.raises(FrameError):
        pr.Weight(0, (0, 0), float("nan"))
    with pytest.raises(FrameError):
        pr.Assign(0, (0, 0), (1, 1 << 32), 0)
    with pytest.raises(FrameError):
        pr.CancelAck(0, (0, 0), 1)


@given(st.lists(message_strategy(), min_size=1, max_size=10), st.integers(1, 17))
def test_frame_buffer_reassembles(msgs, chunk):
    stream = b"".join(pr.frame(m) for m in msgs)
    buf = pr.FrameBuffer()
    out = []
    for i in range(0, len(stream), chunk):
        out.extend(pr.decode(p) for p in buf.feed(stream[i:i + chunk]))
    assert out == msgs and buf.pending == 0


def test_connection_pair():
    a, b = socket.socketpair()
    ca, cb = pr.Connection(a, "runner-1"), pr.Connection(b)
    try:
        t = threading.Thread(target=lambda: [ca.send(pr.Heartbeat(i)) for i in range(50)])
        t.start()
        got = [cb.recv(timeout=5) for _ in range(50)]
        t.join()
        assert [m.sequence for m in got] == list(range(50))
        assert got[0].sender == "runner-1"
        ca.close()
        assert cb.recv(timeout=5) is None
    finally:
        cb.close()


def test_connection_eof_mid_frame():
    a, b = socket.socketpair()
    cb = pr.Connection(b)
    a.sendall(pr.frame(pr.Heartbeat(1))[:-2])
    a.close()
    with pytest.raises(DecodeError):
        cb.recv(timeout=5)
    cb.close()


def test_recv_timeout():
    a, b = socket.socketpair()
    cb = pr.Connection(b)
    with pytest.raises(TimeoutError):
        cb.recv(timeout=0.05)
    a.close()
    cb.close()


def test_parse_address():
    assert pr.parse_address("127.0.0.1:80") == ("127.0.0.1", 80)
    with pytest.raises(ValueError):
        pr.parse_address("nohost")
