"""Apply a SchedAttr to the calling thread and read it back.

Deadline (EDF + CBS) goes through the raw ``sched_setattr`` syscall since
Python's ``os`` module has no binding for it. FIFO, nice and affinity use
``os``. Every apply is verified by reading the thread's state back; on
denial the thread is left under the fair scheduler with nice 0 and the
outcome says so. Set ``ISOEXEC_FORCE_FALLBACK=1`` to skip the OS calls and
always fall back.
"""
from __future__ import annotations

import ctypes
import enum
import errno
import os
import platform
import sys
import threading
from dataclasses import dataclass, field
from typing import Optional

from .model import Policy, SchedAttr, validate_sched_attr

FORCE_FALLBACK_ENV = "ISOEXEC_FORCE_FALLBACK"

SCHED_OTHER = 0
SCHED_FIFO = 1
SCHED_DEADLINE = 6

_SYSCALLS = {
    "x86_64": (314, 315),
    "aarch64": (274, 275),
    "arm64": (274, 275),
}


class InvalidAttr(ValueError):
    pass


class EnforceMismatch(RuntimeError):
    pass


class _SchedAttrStruct(ctypes.Structure):
    _fields_ = [
        ("size", ctypes.c_uint32),
        ("sched_policy", ctypes.c_uint32),
        ("sched_flags", ctypes.c_uint64),
        ("sched_nice", ctypes.c_int32),
        ("sched_priority", ctypes.c_uint32),
        ("sched_runtime", ctypes.c_uint64),
        ("sched_deadline", ctypes.c_uint64),
        ("sched_period", ctypes.c_uint64),
    ]


_libc = None


def _syscall_numbers() -> Optional[tuple[int, int]]:
    if not sys.platform.startswith("linux"):
        return None
    return _SYSCALLS.get(platform.machine())


def _get_libc():
    global _libc
    if _libc is None:
        _libc = ctypes.CDLL(None, use_errno=True)
    return _libc


def _setattr(attr: _SchedAttrStruct) -> None:
    nums = _syscall_numbers()
    if nums is None:
        raise OSError(errno.ENOSYS, "sched_setattr unsupported on this platform")
    attr.size = ctypes.sizeof(_SchedAttrStruct)
    if _get_libc().syscall(nums[0], 0, ctypes.byref(attr), 0) != 0:
        e = ctypes.get_errno()
        raise OSError(e, os.strerror(e))


def _getattr() -> _SchedAttrStruct:
    nums = _syscall_numbers()
    if nums is None:
        raise OSError(errno.ENOSYS, "sched_getattr unsupported on this platform")
    out = _SchedAttrStruct()
    if _get_libc().syscall(nums[1], 0, ctypes.byref(out), ctypes.sizeof(out), 0) != 0:
        e = ctypes.get_errno()
        raise OSError(e, os.strerror(e))
    return out


def core_count() -> int:
    return os.cpu_count() or 1


def _all_cores() -> set[int]:
    try:
        return set(range(os.cpu_count() or 1)) | set(os.sched_getaffinity(0))
    except (AttributeError, OSError):
        return set(range(core_count()))


class Capability(str, enum.Enum):
    AVAILABLE = "available"
    DENIED = "denied"
    UNSUPPORTED = "unsupported-platform"


@dataclass
class CapabilityReport:
    deadline: Capability
    fifo_rt: Capability
    fair: Capability
    cores: int
    forced_fallback: bool = False

    def to_dict(self) -> dict:
        return {
            "deadline": self.deadline.value,
            "fifo_rt": self.fifo_rt.value,
            "fair": self.fair.value,
            "cores": self.cores,
            "forced_fallback": self.forced_fallback,
        }


def forced_fallback() -> bool:
    return os.environ.get(FORCE_FALLBACK_ENV, "").lower() in ("1", "true", "yes", "on")


def _probe_on_scratch_thread() -> dict[str, Capability]:
    result: dict[str, Capability] = {}

    def attempt() -> None:
        linux = sys.platform.startswith("linux")
        if _syscall_numbers() is None:
            result["deadline"] = Capability.UNSUPPORTED
        else:
            try:
                _setattr(_SchedAttrStruct(0, SCHED_DEADLINE, 0, 0, 0, 100_000, 1_000_000, 1_000_000))
                result["deadline"] = Capability.AVAILABLE
            except OSError:
                result["deadline"] = Capability.DENIED
            finally:
                _reset_thread()
        if not hasattr(os, "sched_setscheduler"):
            result["fifo_rt"] = Capability.UNSUPPORTED
        else:
            try:
                os.sched_setscheduler(0, os.SCHED_FIFO, os.sched_param(1))
                result["fifo_rt"] = Capability.AVAILABLE
            except OSError:
                result["fifo_rt"] = Capability.DENIED
            finally:
                _reset_thread()
        # Raising nice is always allowed; lowering it needs privilege, which
        # only matters for negative nice requests, so fair counts as available.
        result["fair"] = Capability.AVAILABLE if linux or hasattr(os, "setpriority") else Capability.UNSUPPORTED

    th = threading.Thread(target=attempt, name="isoexec-probe")
    th.start()
    th.join()
    return result


def probe_capabilities() -> CapabilityReport:
    """Report per policy whether this process may use it.

    Attempts run on a throwaway thread and are reverted there, so the caller's
    scheduling state is untouched.
    """
    caps = _probe_on_scratch_thread()
    return CapabilityReport(caps["deadline"], caps["fifo_rt"], caps["fair"], core_count(), forced_fallback())


def _reset_thread() -> None:
    try:
        if _syscall_numbers() is not None:
            _setattr(_SchedAttrStruct(0, SCHED_OTHER, 0, 0, 0, 0, 0, 0))
        elif hasattr(os, "sched_setscheduler"):
            os.sched_setscheduler(0, os.SCHED_OTHER, os.sched_param(0))
    except OSError:
        pass
    try:
        os.setpriority(os.PRIO_PROCESS, threading.get_native_id(), 0)
    except (OSError, AttributeError):
        pass
    try:
        os.sched_setaffinity(0, _all_cores())
    except (OSError, AttributeError):
        pass


def read_current_thread() -> SchedAttr:
    """The calling thread's scheduling state as the OS reports it."""
    try:
        affinity = frozenset(os.sched_getaffinity(0))
    except (AttributeError, OSError):
        affinity = frozenset()
    if affinity == frozenset(_all_cores()):
        affinity = frozenset()
    try:
        a = _getattr()
        policy, prio, nice = a.sched_policy, a.sched_priority, a.sched_nice
        if policy == SCHED_DEADLINE:
            return SchedAttr(Policy.DEADLINE, runtime_ns=a.sched_runtime, deadline_ns=a.sched_deadline,
                             period_ns=a.sched_period, affinity=affinity)
    except OSError:
        policy = os.sched_getscheduler(0) if hasattr(os, "sched_getscheduler") else SCHED_OTHER
        prio = os.sched_getparam(0).sched_priority if hasattr(os, "sched_getparam") else 0
        nice = os.getpriority(os.PRIO_PROCESS, threading.get_native_id()) if hasattr(os, "getpriority") else 0
    if policy == SCHED_FIFO:
        return SchedAttr(Policy.FIFO_RT, priority=prio, affinity=affinity)
    return SchedAttr(Policy.FAIR, nice=nice, affinity=affinity)


class OutcomeKind(str, enum.Enum):
    APPLIED = "applied"
    FALLBACK = "fallback"


@dataclass
class EnforcementOutcome:
    kind: OutcomeKind
    intended: SchedAttr
    actual: SchedAttr
    reason: str = ""
    thread_id: int = field(default_factory=threading.get_native_id)

    @property
    def applied(self) -> bool:
        return self.kind is OutcomeKind.APPLIED

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "intended": self.intended.to_dict(),
            "actual": self.actual.to_dict(),
            "reason": self.reason,
        }


def _matches(want: SchedAttr, got: SchedAttr) -> bool:
    if want.policy is not got.policy:
        return False
    # read_current_thread reports "every core" as an empty set
    if want.affinity and want.affinity != (got.affinity or frozenset(_all_cores())):
        return False
    if want.policy is Policy.DEADLINE:
        return (want.runtime_ns, want.deadline_ns, want.period_ns) == (got.runtime_ns, got.deadline_ns, got.period_ns)
    if want.policy is Policy.FIFO_RT:
        return want.priority == got.priority
    return want.nice == got.nice


def _apply(attr: SchedAttr) -> None:
    if attr.affinity:
        os.sched_setaffinity(0, attr.affinity)
    if attr.policy is Policy.DEADLINE:
        _setattr(_SchedAttrStruct(0, SCHED_DEADLINE, 0, 0, 0, attr.runtime_ns, attr.deadline_ns, attr.period_ns))
    elif attr.policy is Policy.FIFO_RT:
        os.sched_setscheduler(0, os.SCHED_FIFO, os.sched_param(attr.priority))
    else:
        if hasattr(os, "sched_setscheduler"):
            os.sched_setscheduler(0, os.SCHED_OTHER, os.sched_param(0))
        os.setpriority(os.PRIO_PROCESS, threading.get_native_id(), attr.nice)


def apply_to_current_thread(attr: SchedAttr) -> EnforcementOutcome:
    """Enforce ``attr`` on the calling thread, verified by read-back.

    Raises InvalidAttr for attributes that fail validation. Permission
    problems and read-back mismatches yield a FALLBACK outcome with the
    thread reset to fair/nice 0.
    """
    problems = validate_sched_attr(attr, core_count())
    if problems:
        raise InvalidAttr("; ".join(str(p) for p in problems))
    fallback = SchedAttr.fair(0)
    if forced_fallback():
        return EnforcementOutcome(OutcomeKind.FALLBACK, attr, fallback, f"{FORCE_FALLBACK_ENV} set")
    try:
        _apply(attr)
    except (OSError, AttributeError) as exc:
        _reset_thread()
        return EnforcementOutcome(OutcomeKind.FALLBACK, attr, fallback, f"denied: {exc}")
    got = read_current_thread()
    if not _matches(attr, got):
        mismatch = EnforceMismatch(f"read-back {got.to_dict()} != requested {attr.to_dict()}")
        _reset_thread()
        return EnforcementOutcome(OutcomeKind.FALLBACK, attr, fallback, str(mismatch))
    return EnforcementOutcome(OutcomeKind.APPLIED, attr, got)


def current_cpu() -> int:
    """CPU the calling thread is running on right now (-1 if unknown)."""
    try:
        return _get_libc().sched_getcpu()
    except (AttributeError, OSError):
        return -1
