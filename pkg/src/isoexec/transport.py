"""Topic delivery: in-process reference passing and local stream sockets.

Intra-process subscribers receive the very same ``MessageFrame`` object the
publisher created; nothing enters the kernel. Inter-process subscribers sit
behind a stream socket carrying length-prefixed frames::

    [len:u32le][topic:u16le][seq:u64le][ts:u64le][payload]

One connection is shared by all topics between a pair of processes. Every
socket write and read is counted in ``metrics.counters``.
"""
from __future__ import annotations

import itertools
import json
import logging
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .metrics import counters

log = logging.getLogger(__name__)

HEADER = struct.Struct("<IHQQ")
HEADER_SIZE = HEADER.size  # 22
MAX_TOPICS = 0xFFFF
# Topic id reserved for connection-level control frames.
CONTROL_TOPIC = 0xFFFF
DEFAULT_CAPACITY = 16


class MalformedFrame(ValueError):
    pass


class Closed(Exception):
    """The topic domain was shut down."""


class DisconnectedEndpoint(ConnectionError):
    pass


@dataclass(frozen=True)
class TopicId:
    name: str
    id: int


@dataclass(frozen=True)
class MessageFrame:
    topic: int
    seq: int
    publish_timestamp_ns: int
    payload: bytes = b""

    @property
    def length(self) -> int:
        return len(self.payload)


def encode_frame(frame: MessageFrame) -> bytes:
    if len(frame.payload) >= 1 << 32:
        raise ValueError("payload too large for a u32 length field")
    return HEADER.pack(len(frame.payload), frame.topic, frame.seq, frame.publish_timestamp_ns) + frame.payload


def decode_frame(data: bytes) -> MessageFrame:
    frame, used = decode_prefix(data)
    if frame is None:
        raise MalformedFrame(f"short frame: {len(data)} bytes")
    if used != len(data):
        raise MalformedFrame(f"length mismatch: header says {used - HEADER_SIZE}, got {len(data) - HEADER_SIZE}")
    return frame


def decode_prefix(buf) -> tuple[Optional[MessageFrame], int]:
    """Decode one frame from the front of ``buf``; (None, 0) if incomplete."""
    if len(buf) < HEADER_SIZE:
        return None, 0
    length, topic, seq, ts = HEADER.unpack_from(buf, 0)
    end = HEADER_SIZE + length
    if len(buf) < end:
        return None, 0
    return MessageFrame(topic, seq, ts, bytes(buf[HEADER_SIZE:end])), end


class SubscriptionQueue:
    """Bounded FIFO with drop-oldest overflow and a single consumer.

    ``pushed`` counts every message ever offered; executors compare it before
    and after a callback run to notice activations that arrived meanwhile.
    """

    def __init__(self, topic: TopicId, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.topic = topic
        self.capacity = capacity
        self.drops = 0
        self.pushed = 0
        self.parks = 0
        self._items: deque[MessageFrame] = deque()
        self._cond = threading.Condition(threading.Lock())
        self._closed = False
        self._interrupted = False
        self._consumer: Optional[int] = None
        self._listeners: list[Callable[[], None]] = []

    def add_listener(self, fn: Callable[[], None]) -> None:
        """Call ``fn`` after every push (used by shared wait-sets)."""
        self._listeners.append(fn)

    def push(self, msg: MessageFrame) -> int:
        """Enqueue; returns the number of messages dropped (0 or 1)."""
        dropped = 0
        with self._cond:
            if self._closed:
                raise Closed(self.topic.name)
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self.drops += 1
                dropped = 1
            self._items.append(msg)
            self.pushed += 1
            self._cond.notify()
        for fn in self._listeners:
            fn()
        return dropped

    def __len__(self) -> int:
        return len(self._items)

    def ready(self) -> bool:
        return bool(self._items)

    def take(self) -> Optional[MessageFrame]:
        try:
            return self._items.popleft()
        except IndexError:
            return None

    def await_message(self, blocking: bool = True, timeout: Optional[float] = None) -> Optional[MessageFrame]:
        """Pop the oldest message.

        Non-blocking mode returns None when empty. Blocking mode parks the
        caller until a message arrives, ``interrupt`` is called, or the
        timeout passes; each park is counted. Raises Closed once the queue
        is closed and drained.
        """
        me = threading.get_ident()
        if self._consumer is None:
            self._consumer = me
        assert self._consumer == me, "SubscriptionQueue has a single consumer"
        with self._cond:
            while True:
                if self._items:
                    return self._items.popleft()
                if self._closed:
                    raise Closed(self.topic.name)
                if self._interrupted:
                    self._interrupted = False
                    return None
                if not blocking:
                    return None
                self.parks += 1
                counters.parks.inc()
                if not self._cond.wait(timeout):
                    return None

    def release_consumer(self) -> None:
        self._consumer = None

    def interrupt(self) -> None:
        """Make one pending (or the next) blocking wait return None."""
        with self._cond:
            self._interrupted = True
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        for fn in self._listeners:
            fn()


@dataclass
class DeliverySummary:
    intra_deliveries: int = 0
    inter_deliveries: int = 0
    drops: int = 0
    errors: list[str] = field(default_factory=list)


class RemoteEndpoint:
    """Outgoing side of a stream connection to a subscriber process."""

    def __init__(self, sock: socket.socket, topic_map: dict[int, int]):
        self.sock = sock
        # local topic id -> topic id on the wire (index in the peer's hello)
        self.topic_map = topic_map
        self.connected = True
        self._lock = threading.Lock()

    def send(self, data: bytes) -> None:
        if not self.connected:
            raise DisconnectedEndpoint("endpoint already disconnected")
        try:
            with self._lock:
                counters.transport_writes.inc()
                self.sock.sendall(data)
        except OSError as exc:
            self.connected = False
            raise DisconnectedEndpoint(str(exc)) from exc

    def send_control(self, payload: bytes) -> None:
        self.send(encode_frame(MessageFrame(CONTROL_TOPIC, 0, time.monotonic_ns(), payload)))

    def close(self) -> None:
        self.connected = False
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Publisher:
    """Keeps the sequence number of one (publisher, topic) pair."""

    def __init__(self, domain: "Domain", topic: TopicId):
        self.domain = domain
        self.topic = topic
        self._seq = itertools.count()
        self._lock = threading.Lock()

    def publish(self, payload: bytes) -> DeliverySummary:
        with self._lock:
            seq = next(self._seq)
        return self.domain.deliver(MessageFrame(self.topic.id, seq, time.monotonic_ns(), payload))


class Domain:
    """Topic registry plus local queues and remote endpoints of one process."""

    def __init__(self) -> None:
        self._topics: dict[str, TopicId] = {}
        self._by_id: list[TopicId] = []
        self._subs: dict[int, list[SubscriptionQueue]] = {}
        self._endpoints: list[RemoteEndpoint] = []
        self._default_pubs: dict[int, Publisher] = {}
        self._receivers: list[threading.Thread] = []
        self._lock = threading.Lock()
        self.closed = False
        self.disconnects: list[str] = []
        self.control_handler: Optional[Callable[[bytes], None]] = None

    def register_topic(self, name: str) -> TopicId:
        with self._lock:
            if name in self._topics:
                return self._topics[name]
            if len(self._by_id) >= MAX_TOPICS:
                raise ValueError("topic id space exhausted")
            t = TopicId(name, len(self._by_id))
            self._topics[name] = t
            self._by_id.append(t)
            return t

    def topic(self, name: str) -> TopicId:
        return self._topics[name]

    def topic_by_id(self, tid: int) -> TopicId:
        return self._by_id[tid]

    @property
    def topics(self) -> list[TopicId]:
        return list(self._by_id)

    def subscribe(self, name: str, capacity: int = DEFAULT_CAPACITY) -> SubscriptionQueue:
        t = self.register_topic(name)
        q = SubscriptionQueue(t, capacity)
        with self._lock:
            self._subs.setdefault(t.id, []).append(q)
        return q

    def publisher(self, name: str) -> Publisher:
        return Publisher(self, self.register_topic(name))

    def publish(self, topic: TopicId, payload: bytes) -> DeliverySummary:
        if topic.name not in self._topics:
            raise KeyError(f"topic {topic.name!r} is not registered")
        pub = self._default_pubs.get(topic.id)
        if pub is None:
            pub = self._default_pubs.setdefault(topic.id, Publisher(self, topic))
        return pub.publish(payload)

    def deliver(self, frame: MessageFrame) -> DeliverySummary:
        if self.closed:
            raise Closed("domain is shut down")
        out = DeliverySummary()
        for q in self._subs.get(frame.topic, ()):
            out.drops += q.push(frame)
            out.intra_deliveries += 1
        for ep in self._endpoints:
            wire = ep.topic_map.get(frame.topic)
            if wire is None or not ep.connected:
                continue
            try:
                ep.send(encode_frame(MessageFrame(wire, frame.seq, frame.publish_timestamp_ns, frame.payload)))
                out.inter_deliveries += 1
            except DisconnectedEndpoint as exc:
                out.errors.append(str(exc))
                self.disconnects.append(str(exc))
        return out

    # -- stream connections --------------------------------------------------

    def add_endpoint(self, sock: socket.socket, topic_names: Iterable[str]) -> RemoteEndpoint:
        ep = RemoteEndpoint(sock, {self.register_topic(n).id: i for i, n in enumerate(topic_names)})
        with self._lock:
            self._endpoints.append(ep)
        return ep

    def accept_subscriber(self, server: socket.socket, timeout: Optional[float] = None) -> RemoteEndpoint:
        """Accept one connection and read its hello (the topic names it wants)."""
        server.settimeout(timeout)
        conn, _ = server.accept()
        conn.settimeout(timeout)
        buf = bytearray()
        while True:
            frame, used = decode_prefix(buf)
            if frame is not None:
                break
            chunk = conn.recv(4096)
            counters.transport_reads.inc()
            if not chunk:
                raise DisconnectedEndpoint("subscriber closed before hello")
            buf += chunk
        if frame.topic != CONTROL_TOPIC:
            raise MalformedFrame("expected hello control frame")
        conn.settimeout(None)
        hello = json.loads(frame.payload)
        return self.add_endpoint(conn, hello["topics"])

    def connect_to_publisher(self, path: str, topic_names: list[str]) -> socket.socket:
        """Connect to a publisher process, announce our topics, start receiving."""
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.connect(path)
        for n in topic_names:
            self.register_topic(n)
        hello = json.dumps({"topics": list(topic_names)}).encode()
        counters.transport_writes.inc()
        sock.sendall(encode_frame(MessageFrame(CONTROL_TOPIC, 0, time.monotonic_ns(), hello)))
        self.start_receiver(sock, topic_names)
        return sock

    def start_receiver(self, sock: socket.socket, wire_names: list[str]) -> threading.Thread:
        """Deliver incoming frames locally; wire topic ``i`` means ``wire_names[i]``."""
        wire_to_local = [self.register_topic(n).id for n in wire_names]
        th = threading.Thread(target=self._receive_loop, args=(sock, wire_to_local),
                              name="isoexec-recv", daemon=True)
        th.start()
        self._receivers.append(th)
        return th

    def _receive_loop(self, sock: socket.socket, wire_to_local: list[int]) -> None:
        buf = bytearray()
        chunk = bytearray(65536)
        view = memoryview(chunk)
        while True:
            try:
                n = sock.recv_into(view)
            except OSError:
                break
            counters.transport_reads.inc()
            if n == 0:
                break
            buf += view[:n]
            while True:
                frame, used = decode_prefix(buf)
                if frame is None:
                    break
                del buf[:used]
                if frame.topic == CONTROL_TOPIC:
                    if self.control_handler is not None:
                        self.control_handler(frame.payload)
                    continue
                if frame.topic >= len(wire_to_local):
                    log.warning("dropping frame for unknown wire topic %d", frame.topic)
                    continue
                try:
                    self._deliver_local(wire_to_local[frame.topic], frame)
                except Closed:
                    return
        if self.control_handler is not None:
            self.control_handler(b'{"event": "eof"}')

    def _deliver_local(self, local_topic: int, frame: MessageFrame) -> None:
        if local_topic != frame.topic:
            frame = MessageFrame(local_topic, frame.seq, frame.publish_timestamp_ns, frame.payload)
        for q in self._subs.get(local_topic, ()):
            q.push(frame)

    def join_receivers(self, timeout: Optional[float] = None) -> None:
        for th in self._receivers:
            th.join(timeout)

    def close(self) -> None:
        self.closed = True
        for qs in self._subs.values():
            for q in qs:
                q.close()
        for ep in self._endpoints:
            ep.close()
