"""The three executor models.

``SingleThreadedExecutor``
    One thread, one wait-set. Each cycle blocks until something is ready,
    snapshots the ready set, runs every ready timer in registration order and
    then one message for each ready subscription in registration order.

``MultiThreadedExecutor``
    A pool of workers sharing one wait-set behind one lock. The worker that
    holds the lock rebuilds the wait-set, picks one ready callback whose group
    is idle, marks the group busy and releases the lock before running it.

``CallbackIsolatedExecutor``
    One persistent thread per callback group (per callback in strict mode).
    The thread applies its callback's scheduling attributes once and then only
    ever blocks on its own timer deadline or its own subscription queue. There
    is no shared wait-set and no shared lock on the execution path.

All three count an overrun when a callback's next activation (a timer
expiry or a new message) shows up while that callback is still running. The
activation is then served after the current run finishes, never in parallel.
"""
from __future__ import annotations

import enum
import logging
import os
import threading
import time
import traceback
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from . import schedctl
from .metrics import InstrumentedLock, counters
from .model import (BusyWork, CallbackSpec, ConstraintViolation, NodeSpec, Subscription, Timer, groups_of,
                    validate_sched_attr)
from .schedctl import EnforcementOutcome
from .transport import Closed, Domain, MessageFrame, SubscriptionQueue

log = logging.getLogger(__name__)

Clock = Callable[[], int]


class ExecutorKind(str, enum.Enum):
    SINGLE = "ste"
    MULTI = "mte"
    ISOLATED = "cie"


class SpawnError(RuntimeError):
    pass


class IsolationError(ValueError):
    """Strict callback isolation refused a system with multi-member groups."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class HandlerError(RuntimeError):
    def __init__(self, callback_id: str, detail: str, stats: Optional[dict] = None):
        self.callback_id = callback_id
        self.detail = detail
        self.stats = stats or {}
        super().__init__(f"handler of {callback_id} raised:\n{detail}")


def hardware_concurrency() -> int:
    return os.cpu_count() or 1


@dataclass
class ExecutionRecord:
    start_ns: int
    end_ns: int
    thread_id: int


@dataclass
class CallbackStats:
    callback_id: str
    executions: int = 0
    overruns: int = 0
    busy_ns: int = 0
    max_concurrency: int = 0
    thread_ids: set[int] = field(default_factory=set)
    enforcement: Optional[EnforcementOutcome] = None
    records: list[ExecutionRecord] = field(default_factory=list)

    def copy(self) -> "CallbackStats":
        return CallbackStats(self.callback_id, self.executions, self.overruns, self.busy_ns,
                             self.max_concurrency, set(self.thread_ids), self.enforcement,
                             list(self.records))

    def to_dict(self) -> dict:
        return {
            "callback_id": self.callback_id,
            "executions": self.executions,
            "overruns": self.overruns,
            "busy_ns": self.busy_ns,
            "max_concurrency": self.max_concurrency,
            "thread_ids": sorted(self.thread_ids),
            "enforcement": self.enforcement.to_dict() if self.enforcement else None,
        }


def busy_wait(duration_ns: int, clock: Clock = time.monotonic_ns) -> None:
    end = clock() + duration_ns
    while clock() < end:
        pass


class CallbackRuntime:
    """A callback bound to its queue, publishers and statistics."""

    def __init__(self, spec: CallbackSpec, node: NodeSpec, domain: Domain, clock: Clock,
                 trace: bool, queue_capacity: int):
        self.spec = spec
        self.id = spec.id
        self.clock = clock
        self.trace = trace
        self.queue: Optional[SubscriptionQueue] = None
        if isinstance(spec.kind, Subscription):
            self.queue = domain.subscribe(spec.kind.topic, queue_capacity)
        self.publishers = [domain.publisher(t) for t in node.topics_published_by(spec.id)]
        self.stats = CallbackStats(spec.id)
        self.next_deadline = 0
        self.group_busy = False  # used by the multi-threaded executor only
        self._running = threading.Lock()

    @property
    def is_timer(self) -> bool:
        return isinstance(self.spec.kind, Timer)

    def arm(self, t0: int) -> None:
        if isinstance(self.spec.kind, Timer):
            self.next_deadline = t0 + self.spec.kind.offset_ns + self.spec.kind.period_ns

    def timer_due(self, now: int) -> bool:
        return self.is_timer and self.next_deadline <= now

    def take_timer(self) -> None:
        # Absolute deadlines: the next expiry is relative to the previous one.
        self.next_deadline += self.spec.kind.period_ns

    def execute(self, msg: Optional[MessageFrame]) -> None:
        start = self.clock()
        pushed_before = self.queue.pushed if self.queue is not None else 0
        exclusive = self._running.acquire(False)
        concurrency = 1 if exclusive else 2
        try:
            self._invoke(msg)
        finally:
            end = self.clock()
            if exclusive:
                self._running.release()
            st = self.stats
            st.executions += 1
            st.busy_ns += end - start
            st.max_concurrency = max(st.max_concurrency, concurrency)
            tid = threading.get_native_id()
            st.thread_ids.add(tid)
            if self.trace:
                st.records.append(ExecutionRecord(start, end, tid))
            if self.is_timer:
                if start < self.next_deadline <= end:
                    st.overruns += 1
            elif self.queue.pushed > pushed_before:
                st.overruns += 1

    def _invoke(self, msg: Optional[MessageFrame]) -> None:
        h = self.spec.handler
        if isinstance(h, BusyWork):
            if h.duration_ns:
                busy_wait(h.duration_ns)
            payload: Optional[bytes] = bytes(h.payload_bytes) if self.publishers else None
        else:
            payload = h(msg)
        if payload is not None:
            for pub in self.publishers:
                pub.publish(payload)


class _ReadySetLoop:
    """Wait-set semantics shared by the single-threaded executor and
    multi-member groups of the permissive isolated executor."""

    def __init__(self, callbacks: Sequence[CallbackRuntime], clock: Clock, on_error):
        self.callbacks = list(callbacks)
        self.timers = [c for c in self.callbacks if c.is_timer]
        self.subs = [c for c in self.callbacks if not c.is_timer]
        self.clock = clock
        self.on_error = on_error
        self.stopping = False
        self.cycles = 0
        self._guard = threading.Condition(threading.Lock())
        self._pending = False
        for c in self.subs:
            c.queue.add_listener(self.notify)

    def notify(self) -> None:
        with self._guard:
            self._pending = True
            self._guard.notify()

    def _snapshot(self, now: int):
        return [c for c in self.timers if c.next_deadline <= now], [c for c in self.subs if c.queue.ready()]

    def spin_once(self, timeout_ns: Optional[int] = None) -> int:
        """Run one wait cycle; returns the number of callbacks executed."""
        now = self.clock()
        timers, subs = self._snapshot(now)
        if not timers and not subs:
            with self._guard:
                wait = timeout_ns
                if self.timers:
                    until = min(c.next_deadline for c in self.timers) - now
                    wait = until if wait is None else min(wait, until)
                if not self._pending and not self.stopping and (wait is None or wait > 0):
                    counters.parks.inc()
                    self._guard.wait(None if wait is None else wait / 1e9)
                self._pending = False
            timers, subs = self._snapshot(self.clock())
            if not timers and not subs:
                return 0
        self.cycles += 1
        for c in timers:
            c.take_timer()
            c.execute(None)
        for c in subs:
            msg = c.queue.take()
            if msg is not None:
                c.execute(msg)
        return len(timers) + len(subs)

    def spin(self) -> None:
        try:
            while not self.stopping:
                self.spin_once()
        except Exception:
            self.on_error(self._current_hint(), traceback.format_exc())

    def _current_hint(self) -> str:
        running = [c.id for c in self.callbacks if c._running.locked()]
        return running[0] if running else (self.callbacks[0].id if self.callbacks else "?")

    def stop(self) -> None:
        self.stopping = True
        self.notify()


class Executor:
    kind: ExecutorKind

    def __init__(self, nodes: Sequence[NodeSpec], domain: Optional[Domain] = None, *,
                 clock: Clock = time.monotonic_ns, trace: bool = False, queue_capacity: int = 16):
        self.nodes = list(nodes)
        self.domain = domain if domain is not None else Domain()
        self.clock = clock
        for cb in _iter(self.nodes):
            if cb.sched is not None:
                problems = validate_sched_attr(cb.sched)
                if problems:
                    raise schedctl.InvalidAttr(f"{cb.id}: " + "; ".join(map(str, problems)))
        self.callbacks: list[CallbackRuntime] = [
            CallbackRuntime(cb, node, self.domain, clock, trace, queue_capacity)
            for node in self.nodes for cb in node.callbacks
        ]
        self.by_id = {c.id: c for c in self.callbacks}
        self.threads: list[threading.Thread] = []
        self.started = False
        self.error: Optional[HandlerError] = None
        self._stopped = False
        self._final: Optional[dict[str, CallbackStats]] = None
        self._thread_owner: dict[int, str] = {}

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> "Executor":
        if self.started:
            raise RuntimeError("executor already started")
        self.started = True
        t0 = self.clock()
        for c in self.callbacks:
            c.arm(t0)
        self._spawn()
        return self

    def _spawn(self) -> None:
        raise NotImplementedError

    def _start_thread(self, target, name: str, owner: str) -> threading.Thread:
        th = threading.Thread(target=target, name=name, daemon=True)
        try:
            th.start()
        except RuntimeError as exc:
            self._request_stop()
            raise SpawnError(f"could not start thread for {owner}: {exc}") from exc
        self.threads.append(th)
        self._thread_owner[th.ident] = owner
        return th

    def _on_error(self, callback_id: str, detail: str) -> None:
        if self.error is None:
            self.error = HandlerError(callback_id, detail)
            log.error("handler of %s failed, shutting executor down:\n%s", callback_id, detail)
        self._request_stop()

    def _request_stop(self) -> None:
        raise NotImplementedError

    def stats(self) -> dict[str, CallbackStats]:
        """Point-in-time copy of the per-callback statistics."""
        if self._final is not None:
            return self._final
        return {c.id: c.stats.copy() for c in self.callbacks}

    @property
    def fallback_count(self) -> int:
        return sum(1 for s in self.stats().values() if s.enforcement is not None and not s.enforcement.applied)

    def shutdown(self, timeout: float = 2.0) -> dict[str, CallbackStats]:
        """Stop and join every thread; idempotent.

        Raises TimeoutError naming the callbacks whose threads did not exit
        within ``timeout`` seconds, and HandlerError if a handler raised.
        """
        if threading.get_ident() in self._thread_owner:
            raise RuntimeError("executor control called from one of its own handlers")
        if self._final is not None:
            return self._final
        self._stopped = True
        self._request_stop()
        deadline = time.monotonic() + timeout
        stuck = []
        for th in self.threads:
            th.join(max(0.0, deadline - time.monotonic()))
            if th.is_alive():
                stuck.append(self._thread_owner.get(th.ident, th.name))
        if stuck:
            raise TimeoutError(f"threads did not exit within {timeout}s: {', '.join(stuck)}")
        for c in self.callbacks:
            if c.queue is not None:
                c.queue.release_consumer()
        self._final = {c.id: c.stats.copy() for c in self.callbacks}
        if self.error is not None:
            self.error.stats = self._final
            raise self.error
        return self._final

    def __enter__(self) -> "Executor":
        return self.start() if not self.started else self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def _iter(nodes: Iterable[NodeSpec]) -> Iterable[CallbackSpec]:
    for n in nodes:
        yield from n.callbacks


class SingleThreadedExecutor(Executor):
    kind = ExecutorKind.SINGLE

    def __init__(self, nodes, domain=None, **kw):
        super().__init__(nodes, domain, **kw)
        self.loop = _ReadySetLoop(self.callbacks, self.clock, self._on_error)

    def arm(self, t0: Optional[int] = None) -> None:
        """Arm timers without spawning a thread (for driving ``spin_once`` by hand)."""
        t0 = self.clock() if t0 is None else t0
        for c in self.callbacks:
            c.arm(t0)

    def spin_once(self, timeout_ns: Optional[int] = None) -> int:
        return self.loop.spin_once(timeout_ns)

    def _spawn(self) -> None:
        self._start_thread(self.loop.spin, "isoexec-ste", "single-threaded loop")

    def _request_stop(self) -> None:
        self.loop.stop()


class MultiThreadedExecutor(Executor):
    kind = ExecutorKind.MULTI

    def __init__(self, nodes, domain=None, workers: Optional[int] = None, **kw):
        super().__init__(nodes, domain, **kw)
        self.workers = workers if workers is not None else hardware_concurrency()
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        self.generation = 0
        self.stopping = False
        self._wait_lock = InstrumentedLock()
        self._guard = threading.Condition(threading.Lock())
        self._pending = False
        groups = groups_of(self.nodes)
        self._group_of = {cid: g.id for g in groups.values() for cid in g.members}
        self._group_busy = {g: False for g in groups}
        self._timers = [c for c in self.callbacks if c.is_timer]
        self._subs = [c for c in self.callbacks if not c.is_timer]
        for c in self._subs:
            c.queue.add_listener(self._trigger)

    def _trigger(self) -> None:
        with self._guard:
            self._pending = True
            self._guard.notify()

    def _select(self, now: int):
        for c in self._timers:
            if c.next_deadline <= now and not self._group_busy[self._group_of[c.id]]:
                c.take_timer()
                return c, None
        for c in self._subs:
            if c.queue.ready() and not self._group_busy[self._group_of[c.id]]:
                msg = c.queue.take()
                if msg is not None:
                    return c, msg
        return None

    def _acquire_work(self):
        with self._wait_lock:
            while not self.stopping:
                with self._guard:
                    self._pending = False
                self.generation += 1  # wait-set rebuild
                now = self.clock()
                picked = self._select(now)
                if picked is not None:
                    self._group_busy[self._group_of[picked[0].id]] = True
                    return picked
                idle = [c.next_deadline for c in self._timers if not self._group_busy[self._group_of[c.id]]]
                with self._guard:
                    if self._pending or self.stopping:
                        continue
                    wait = (min(idle) - self.clock()) / 1e9 if idle else None
                    if wait is None or wait > 0:
                        counters.parks.inc()
                        self._guard.wait(wait)
        return None

    def _worker(self) -> None:
        current = None
        try:
            while not self.stopping:
                picked = self._acquire_work()
                if picked is None:
                    return
                current, msg = picked
                try:
                    current.execute(msg)
                finally:
                    self._group_busy[self._group_of[current.id]] = False
                    self._trigger()
                current = None
        except Exception:
            self._on_error(current.id if current else "?", traceback.format_exc())

    def _spawn(self) -> None:
        for i in range(self.workers):
            self._start_thread(self._worker, f"isoexec-mte-{i}", f"worker {i}")

    def _request_stop(self) -> None:
        self.stopping = True
        with self._guard:
            self._guard.notify_all()


class CallbackIsolatedExecutor(Executor):
    kind = ExecutorKind.ISOLATED

    def __init__(self, nodes, domain=None, strict: bool = True, apply_sched: bool = True, **kw):
        if strict:
            bad = [ConstraintViolation("group-size", g.id, f"group {g.id} has {len(g.members)} members")
                   for g in groups_of(nodes).values() if len(g.members) > 1]
            if bad:
                raise IsolationError(bad)
        super().__init__(nodes, domain, **kw)
        self.strict = strict
        self.apply_sched = apply_sched
        self.stopping = False
        groups = groups_of(self.nodes)
        self.groups = [[self.by_id[m] for m in g.members] for g in groups.values()]
        self._wakers: list[Callable[[], None]] = []
        self.thread_of: dict[str, int] = {}

    def _spawn(self) -> None:
        for members in self.groups:
            name = members[0].id if len(members) == 1 else "+".join(m.id for m in members)
            self._start_thread(self._make_thread(members), f"isoexec-cb-{name}", name)

    def _make_thread(self, members: list[CallbackRuntime]):
        if len(members) > 1:
            loop = _ReadySetLoop(members, self.clock, self._on_error)
            self._wakers.append(loop.stop)
            return lambda: self._run_group(members, loop.spin)
        cb = members[0]
        if cb.is_timer:
            stop = threading.Event()  # private to this thread
            self._wakers.append(stop.set)
            return lambda: self._run_group(members, lambda: self._timer_loop(cb, stop))
        self._wakers.append(cb.queue.interrupt)
        return lambda: self._run_group(members, lambda: self._subscription_loop(cb))

    def _run_group(self, members: list[CallbackRuntime], body) -> None:
        tid = threading.get_native_id()
        for m in members:
            self.thread_of[m.id] = tid
        sched = next((m.spec.sched for m in members if m.spec.sched is not None), None)
        if sched is not None and self.apply_sched:
            outcome = schedctl.apply_to_current_thread(sched)
            for m in members:
                m.stats.enforcement = outcome
        body()

    def _timer_loop(self, cb: CallbackRuntime, stop: threading.Event) -> None:
        try:
            while not self.stopping:
                wait = cb.next_deadline - self.clock()
                if wait > 0:
                    counters.parks.inc()
                    if stop.wait(wait / 1e9):
                        return
                cb.take_timer()
                cb.execute(None)
        except Exception:
            self._on_error(cb.id, traceback.format_exc())

    def _subscription_loop(self, cb: CallbackRuntime) -> None:
        try:
            while not self.stopping:
                msg = cb.queue.await_message(blocking=True)
                if msg is not None:
                    cb.execute(msg)
        except Closed:
            if not self.stopping:
                self._on_error(cb.id, "subscription queue closed while running")
        except Exception:
            self._on_error(cb.id, traceback.format_exc())

    def _request_stop(self) -> None:
        self.stopping = True
        for wake in self._wakers:
            wake()


def make_executor(kind, nodes: Sequence[NodeSpec], domain: Optional[Domain] = None, *,
                  workers: Optional[int] = None, strict: bool = True, **kw) -> Executor:
    kind = ExecutorKind(kind)
    if kind is ExecutorKind.SINGLE:
        return SingleThreadedExecutor(nodes, domain, **kw)
    if kind is ExecutorKind.MULTI:
        return MultiThreadedExecutor(nodes, domain, workers=workers, **kw)
    return CallbackIsolatedExecutor(nodes, domain, strict=strict, **kw)


def spin_single_threaded(nodes, domain=None, **kw) -> SingleThreadedExecutor:
    return SingleThreadedExecutor(nodes, domain, **kw).start()


def spin_multi_threaded(nodes, workers: Optional[int] = None, domain=None, **kw) -> MultiThreadedExecutor:
    return MultiThreadedExecutor(nodes, domain, workers=workers, **kw).start()


def spin_callback_isolated(nodes, strict: bool = True, domain=None, **kw) -> CallbackIsolatedExecutor:
    return CallbackIsolatedExecutor(nodes, domain, strict=strict, **kw).start()
