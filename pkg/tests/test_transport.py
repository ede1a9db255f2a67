import socket
import threading
import time

import pytest
from hypothesis import given, strategies as st

from isoexec.metrics import counters
from isoexec.transport import (HEADER_SIZE, Closed, Domain, MalformedFrame, MessageFrame, SubscriptionQueue,
                               TopicId, decode_frame, encode_frame)


def test_empty_frame_is_22_bytes():
    data = encode_frame(MessageFrame(0, 0, 0, b""))
    assert len(data) == 22 == HEADER_SIZE
    assert data == bytes(22)


def test_frame_layout_is_little_endian_without_padding():
    data = encode_frame(MessageFrame(0x0102, 0x03, 0x04, b"xy"))
    assert data == (b"\x02\x00\x00\x00" + b"\x02\x01" + b"\x03" + bytes(7) + b"\x04" + bytes(7) + b"xy")


frames = st.builds(MessageFrame, st.integers(0, 0xFFFF), st.integers(0, 2**64 - 1),
                   st.integers(0, 2**64 - 1), st.binary(max_size=256))


@given(frames)
def test_round_trip(frame):
    assert decode_frame(encode_frame(frame)) == frame


def test_truncated_header():
    with pytest.raises(MalformedFrame):
        decode_frame(bytes(10))


def test_length_mismatch():
    data = encode_frame(MessageFrame(1, 1, 1, b"abc"))
    with pytest.raises(MalformedFrame):
        decode_frame(data[:-1])
    with pytest.raises(MalformedFrame):
        decode_frame(data + b"z")


def test_intra_delivery_has_no_kernel_crossing():
    d = Domain()
    q = d.subscribe("/x")
    before = counters.delivery_crossings
    out = d.publish(d.topic("/x"), b"hi")
    assert (out.intra_deliveries, out.inter_deliveries, out.drops) == (1, 0, 0)
    assert counters.delivery_crossings == before
    assert q.take().payload == b"hi"


def test_intra_delivery_passes_the_same_object():
    d = Domain()
    q1, q2 = d.subscribe("/x"), d.subscribe("/x")
    d.publish(d.topic("/x"), b"p")
    assert q1.take() is q2.take()


def test_inter_delivery_counts_one_write():
    d = Domain()
    a, b = socket.socketpair()
    d.add_endpoint(a, ["/x"])
    before = counters.transport_writes.value
    out = d.publish(d.topic("/x"), b"hello")
    assert (out.intra_deliveries, out.inter_deliveries, out.drops) == (0, 1, 0)
    assert counters.transport_writes.value == before + 1
    frame = decode_frame(b.recv(1024))
    assert frame.payload == b"hello" and frame.topic == 0
    a.close(), b.close()


def test_disconnected_endpoint_is_recorded_not_fatal():
    d = Domain()
    a, b = socket.socketpair()
    d.add_endpoint(a, ["/x"])
    b.close()
    errors = []
    for _ in range(3):
        errors += d.publish(d.topic("/x"), b"x" * 100000).errors
    assert len(errors) == 1 and d.disconnects == errors
    a.close()


def test_overflow_drops_oldest():
    d = Domain()
    q = d.subscribe("/x", capacity=16)
    drops = sum(d.publish(d.topic("/x"), bytes([i])).drops for i in range(17))
    assert drops == 1 and q.drops == 1 and len(q) == 16
    assert [q.take().seq for _ in range(16)] == list(range(1, 17))


@given(st.lists(st.booleans(), max_size=80), st.integers(1, 8))
def test_seq_strictly_increasing_gaps_only_with_drops(ops, cap):
    d = Domain()
    q = d.subscribe("/x", capacity=cap)
    seen = []
    for publish in ops:
        if publish:
            d.publish(d.topic("/x"), b"")
        else:
            m = q.take()
            if m is not None:
                seen.append(m.seq)
    while (m := q.take()) is not None:
        seen.append(m.seq)
    assert all(a < b for a, b in zip(seen, seen[1:]))
    assert len(seen) + q.drops == sum(ops)
    if seen != list(range(len(seen))):
        assert q.drops > 0


def test_await_nonblocking_on_empty():
    q = SubscriptionQueue(TopicId("/x", 0))
    assert q.await_message(blocking=False) is None


def test_await_blocking_with_message_present_does_not_park():
    q = SubscriptionQueue(TopicId("/x", 0))
    q.push(MessageFrame(0, 7, 0))
    before = q.parks
    assert q.await_message(blocking=True).seq == 7
    assert q.parks == before


def test_await_blocking_parks_once_until_publish():
    # Two threads, ordered explicitly: the consumer is known to be parked
    # (waiting on the condition) before the producer publishes.
    d = Domain()
    q = d.subscribe("/x")
    got = []
    parks_before = q.parks

    def consume():
        got.append(q.await_message(blocking=True))

    th = threading.Thread(target=consume)
    th.start()
    deadline = time.monotonic() + 5
    while q.parks == parks_before and time.monotonic() < deadline:
        time.sleep(0.001)
    d.publish(d.topic("/x"), b"m")
    th.join(5)
    assert got and got[0].payload == b"m"
    assert q.parks - parks_before == 1


def test_single_consumer_is_asserted():
    q = SubscriptionQueue(TopicId("/x", 0))
    q.await_message(blocking=False)
    err = []

    def other():
        try:
            q.await_message(blocking=False)
        except AssertionError as e:
            err.append(e)

    th = threading.Thread(target=other)
    th.start()
    th.join()
    assert err


def test_closed_domain_raises():
    d = Domain()
    q = d.subscribe("/x")
    d.close()
    with pytest.raises(Closed):
        q.await_message(blocking=True)
    with pytest.raises(Closed):
        d.publish(d.topic("/x"), b"")


def test_stream_connection_end_to_end(tmp_path):
    path = str(tmp_path / "s.sock")
    server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    server.bind(path)
    server.listen(1)
    pub_side, sub_side = Domain(), Domain()
    pub_side.register_topic("/unrelated")
    q = sub_side.subscribe("/b")
    result = {}
    th = threading.Thread(target=lambda: result.setdefault("ep", pub_side.accept_subscriber(server, 5)))
    th.start()
    sub_side.connect_to_publisher(path, ["/a", "/b"])
    th.join(5)
    pub_b = pub_side.publisher("/b")
    for i in range(5):
        pub_b.publish(bytes([i]))
    got = [q.await_message(blocking=True, timeout=5) for _ in range(5)]
    assert [m.payload for m in got] == [bytes([i]) for i in range(5)]
    assert [m.seq for m in got] == list(range(5))
    assert all(m.topic == sub_side.topic("/b").id for m in got)
    result["ep"].close()
    server.close()
