import json
import os
import shutil
import subprocess
import sys
import tempfile
import threading
import time

import pytest

from isoexec import schedctl
from isoexec.executors import CallbackIsolatedExecutor
from isoexec.model import MS, CallbackSpec, NodeSpec, Policy, SchedAttr, Timer
from isoexec.schedctl import Capability, InvalidAttr, OutcomeKind


def _on_scratch_thread(fn):
    """Run fn on a throwaway thread (its scheduling state dies with it)."""
    box = {}

    def body():
        try:
            box["value"] = fn()
        finally:
            schedctl._reset_thread()

    th = threading.Thread(target=body)
    th.start()
    th.join(10)
    return box["value"]


def _fifo_available():
    return schedctl.probe_capabilities().fifo_rt is Capability.AVAILABLE


def _deadline_available():
    return schedctl.probe_capabilities().deadline is Capability.AVAILABLE


privileged = pytest.mark.privileged


def test_probe_reports_every_policy():
    rep = schedctl.probe_capabilities()
    assert rep.cores >= 1
    assert rep.fair is Capability.AVAILABLE
    d = rep.to_dict()
    assert set(d) == {"deadline", "fifo_rt", "fair", "cores", "forced_fallback"}
    assert all(d[k] in {"available", "denied", "unsupported-platform"} for k in ("deadline", "fifo_rt", "fair"))


def test_probe_leaves_caller_untouched():
    before = schedctl.read_current_thread()
    schedctl.probe_capabilities()
    assert schedctl.read_current_thread() == before


def test_invalid_attr_raises():
    with pytest.raises(InvalidAttr):
        schedctl.apply_to_current_thread(SchedAttr.fifo(0))
    with pytest.raises(InvalidAttr):
        schedctl.apply_to_current_thread(SchedAttr.fair(0, affinity={schedctl.core_count() + 5}))


def test_forced_fallback_is_recorded(monkeypatch):
    monkeypatch.setenv(schedctl.FORCE_FALLBACK_ENV, "1")
    out = _on_scratch_thread(lambda: schedctl.apply_to_current_thread(SchedAttr.fifo(50)))
    assert out.kind is OutcomeKind.FALLBACK and not out.applied
    assert out.actual == SchedAttr.fair(0)
    assert out.intended == SchedAttr.fifo(50)
    assert schedctl.probe_capabilities().forced_fallback


def test_fallback_counted_by_executor(monkeypatch):
    monkeypatch.setenv(schedctl.FORCE_FALLBACK_ENV, "1")
    node = NodeSpec("n", [CallbackSpec("t", Timer(5 * MS), "g", sched=SchedAttr.fifo(10))])
    ex = CallbackIsolatedExecutor([node]).start()
    stats = ex.shutdown()
    assert ex.fallback_count == 1
    assert stats["t"].enforcement.kind is OutcomeKind.FALLBACK


def test_fair_nice_applies_without_privilege():
    out = _on_scratch_thread(lambda: (schedctl.apply_to_current_thread(SchedAttr.fair(5)),
                                      schedctl.read_current_thread()))
    assert out[0].applied
    assert out[1].policy is Policy.FAIR and out[1].nice == 5


_DENIAL_SCRIPT = """
import json, os
os.setgroups([]); os.setgid(65534); os.setuid(65534)
from isoexec import schedctl
from isoexec.model import SchedAttr, MS
out = schedctl.apply_to_current_thread(SchedAttr.deadline(2 * MS, 8 * MS, 10 * MS))
now = schedctl.read_current_thread()
print(json.dumps({"kind": out.kind.value, "policy": now.policy.value,
                  "deadline": schedctl.probe_capabilities().deadline.value}))
"""


@pytest.mark.skipif(os.geteuid() != 0, reason="needs root to drop to an unprivileged uid")
def test_deadline_without_privilege_falls_back_to_fair():
    # The unprivileged uid cannot read the source tree, so hand it a copy.
    root = tempfile.mkdtemp()
    try:
        os.chmod(root, 0o755)
        shutil.copytree(os.path.dirname(schedctl.__file__), os.path.join(root, "isoexec"))
        env = dict(os.environ, PYTHONPATH=root)
        proc = subprocess.run([sys.executable, "-c", _DENIAL_SCRIPT], capture_output=True, text=True,
                              timeout=30, env=env, cwd=root)
    finally:
        shutil.rmtree(root)
    assert proc.returncode == 0, proc.stderr
    got = json.loads(proc.stdout)
    assert got == {"kind": "fallback", "policy": "fair", "deadline": "denied"}


@privileged
@pytest.mark.skipif(not _fifo_available(), reason="FIFO real-time policy not permitted here")
def test_fifo_applied_and_read_back():
    def go():
        first = schedctl.apply_to_current_thread(SchedAttr.fifo(50))
        s1 = schedctl.read_current_thread()
        second = schedctl.apply_to_current_thread(SchedAttr.fifo(50))
        s2 = schedctl.read_current_thread()
        return first, s1, second, s2

    first, s1, second, s2 = _on_scratch_thread(go)
    assert first.applied and second.applied
    assert s1.policy is Policy.FIFO_RT and s1.priority == 50
    assert s1 == s2


@privileged
@pytest.mark.skipif(not _deadline_available(), reason="deadline policy not permitted here")
def test_deadline_applied_and_read_back():
    attr = SchedAttr.deadline(2 * MS, 8 * MS, 10 * MS)
    out, now = _on_scratch_thread(lambda: (schedctl.apply_to_current_thread(attr),
                                           schedctl.read_current_thread()))
    assert out.applied
    assert (now.policy, now.runtime_ns, now.deadline_ns, now.period_ns) == (Policy.DEADLINE, 2 * MS, 8 * MS, 10 * MS)


def _sampled_cpus(core: int, executions: int = 100) -> list[int]:
    cpus = []
    node = NodeSpec("n", [CallbackSpec("t", Timer(2 * MS), "g", lambda m: cpus.append(schedctl.current_cpu()),
                                       sched=SchedAttr.fair(0, affinity={core}))])
    ex = CallbackIsolatedExecutor([node]).start()
    deadline = time.monotonic() + 10
    while len(cpus) < executions and time.monotonic() < deadline:
        time.sleep(0.02)
    stats = ex.shutdown()
    assert stats["t"].enforcement.applied
    return cpus


def test_affinity_to_core_zero_is_observed():
    cpus = _sampled_cpus(0)
    assert len(cpus) >= 100
    assert set(cpus) == {0}


@privileged
@pytest.mark.skipif(schedctl.core_count() < 3, reason="affinity {2} needs at least 3 cores")
def test_affinity_to_core_two_is_observed():
    cpus = _sampled_cpus(2)
    assert len(cpus) >= 100
    assert set(cpus) == {2}
