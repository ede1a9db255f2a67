"""Overhead accounting: context switches, user-kernel crossings, memory.

Context switches and memory come from the OS (``getrusage`` covers every
thread of the process, including ones that already exited; memory comes
from ``/proc/self/status``). User-kernel crossings are counted by the
framework itself at each point where it enters the kernel: stream
transport writes and reads, and thread parks on timers or queues. That
count is exact and reproducible but is not a syscall tracer; compare it
across executors, not against absolute numbers from other stacks.
"""
from __future__ import annotations

import csv
import io
import resource
import threading
import time
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence


class AccountingUnavailable(RuntimeError):
    pass


class WindowTooShort(ValueError):
    pass


class Counter:
    """Lock-free event counter.

    Each thread increments its own slot, so increments never contend and
    never lose updates; ``value`` sums the slots.
    """

    def __init__(self, name: str):
        self.name = name
        self._slots: dict[int, list[int]] = {}
        self._local = threading.local()

    def inc(self, n: int = 1) -> None:
        try:
            slot = self._local.slot
        except AttributeError:
            slot = self._local.slot = [0]
            self._slots[id(slot)] = slot
        slot[0] += n

    @property
    def value(self) -> int:
        return sum(s[0] for s in list(self._slots.values()))


class Counters:
    def __init__(self) -> None:
        self.transport_writes = Counter("transport_writes")
        self.transport_reads = Counter("transport_reads")
        self.parks = Counter("parks")
        # Acquisitions of locks shared between executor threads (wait-set lock).
        self.shared_lock_acquisitions = Counter("shared_lock_acquisitions")

    @property
    def delivery_crossings(self) -> int:
        return self.transport_writes.value + self.transport_reads.value

    @property
    def kernel_crossings(self) -> int:
        return self.delivery_crossings + self.parks.value

    def snapshot(self) -> dict[str, int]:
        return {
            "transport_writes": self.transport_writes.value,
            "transport_reads": self.transport_reads.value,
            "parks": self.parks.value,
            "shared_lock_acquisitions": self.shared_lock_acquisitions.value,
        }


counters = Counters()


class InstrumentedLock:
    """A ``threading.Lock`` that counts acquisitions into ``counters``."""

    def __init__(self) -> None:
        self._lock = threading.Lock()

    def acquire(self, blocking: bool = True, timeout: float = -1) -> bool:
        ok = self._lock.acquire(blocking, timeout)
        if ok:
            counters.shared_lock_acquisitions.inc()
        return ok

    def release(self) -> None:
        self._lock.release()

    def __enter__(self) -> "InstrumentedLock":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()


@dataclass(frozen=True)
class MetricsSample:
    t_ns: int
    voluntary_cs: int
    involuntary_cs: int
    kernel_crossings: int
    rss_bytes: int
    os_available: bool = True

    @property
    def context_switches(self) -> int:
        return self.voluntary_cs + self.involuntary_cs


CSV_HEADER = ("t_ns", "voluntary_cs", "involuntary_cs", "kernel_crossings", "rss_bytes")


def _read_status() -> dict[str, str]:
    out = {}
    with open("/proc/self/status") as f:
        for line in f:
            key, _, val = line.partition(":")
            out[key] = val.strip()
    return out


def rss_bytes() -> tuple[int, int]:
    """(current, peak) resident set size in bytes."""
    try:
        st = _read_status()
        return int(st["VmRSS"].split()[0]) * 1024, int(st["VmHWM"].split()[0]) * 1024
    except (OSError, KeyError, ValueError):
        peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
        return peak, peak


def sample_process() -> MetricsSample:
    t = time.monotonic_ns()
    try:
        ru = resource.getrusage(resource.RUSAGE_SELF)
        vol, invol = ru.ru_nvcsw, ru.ru_nivcsw
        rss, _ = rss_bytes()
        ok = True
    except (OSError, AttributeError):
        vol = invol = rss = 0
        ok = False
    return MetricsSample(t, vol, invol, counters.kernel_crossings, rss, ok)


@dataclass(frozen=True)
class RateReport:
    window_s: float
    user_kernel_switches_per_s: float
    context_switches_per_s: float
    rss_peak_bytes: int
    fallback_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(per_process: Sequence[Sequence[MetricsSample]], fallback_count: int = 0,
              min_window_s: float = 1.0) -> RateReport:
    """Per-process first/last deltas over the window, summed over processes.

    Interior samples only contribute to the RSS peak. The reported window is
    the longest per-process window.
    """
    if not per_process:
        raise ValueError("no samples")
    uks = cs = 0.0
    rss_peak = 0
    window = 0.0
    for samples in per_process:
        if len(samples) < 2:
            raise WindowTooShort("need at least two samples per process")
        first, last = samples[0], samples[-1]
        w = (last.t_ns - first.t_ns) / 1e9
        if w < min_window_s:
            raise WindowTooShort(f"window {w:.3f}s shorter than {min_window_s}s")
        uks += (last.kernel_crossings - first.kernel_crossings) / w
        cs += (last.context_switches - first.context_switches) / w
        rss_peak += max(s.rss_bytes for s in samples)
        window = max(window, w)
    return RateReport(window, uks, cs, rss_peak, fallback_count)


def samples_to_csv(samples: Iterable[MetricsSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for s in samples:
        w.writerow([s.t_ns, s.voluntary_cs, s.involuntary_cs, s.kernel_crossings, s.rss_bytes])
    return buf.getvalue()


def samples_from_csv(text: str) -> list[MetricsSample]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [MetricsSample(*(int(r[k]) for k in CSV_HEADER)) for r in rows]


class Sampler:
    """Collects samples from the control thread at a fixed cadence."""

    def __init__(self, interval_s: float = 0.1):
        self.interval_s = interval_s
        self.samples: list[MetricsSample] = []

    def run_for(self, duration_s: float, stop: Optional[threading.Event] = None) -> list[MetricsSample]:
        start = time.monotonic()
        self.samples.append(sample_process())
        while True:
            remaining = duration_s - (time.monotonic() - start)
            if remaining <= 0:
                break
            if stop is not None and stop.wait(min(self.interval_s, remaining)):
                break
            if stop is None:
                time.sleep(min(self.interval_s, remaining))
            self.samples.append(sample_process())
        if self.samples[-1].t_ns == self.samples[0].t_ns:
            self.samples.append(sample_process())
        return self.samples
