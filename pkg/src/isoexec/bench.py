"""Overhead experiments: an N-timer publisher node feeding an N-subscription
subscriber node, hosted by one executor (intra-process) or one executor per
process (inter-process), with N swept and results ratioed against the
single-threaded baseline.

In inter-process mode the runner hosts the publisher and re-invokes the CLI
as ``isoexec run --role subscriber`` with the cell configuration in the
``ISOEXEC_CELL`` environment variable. The child connects back over a Unix
stream socket, reports its own samples and statistics as JSON on stdout,
and the runner sums both processes.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

from . import metrics
from .executors import CallbackIsolatedExecutor, ExecutorKind, IsolationError, hardware_concurrency, make_executor
from .metrics import MetricsSample, RateReport, Sampler, aggregate, counters
from .model import MS, NodeSpec, SchedAttr, benchmark_pair
from .transport import Domain

log = logging.getLogger(__name__)

CELL_ENV = "ISOEXEC_CELL"
DEFAULT_N_LIST = (1, 4, 8, 12, 16, 20, 24)
ALL_EXECUTORS = ("ste", "mte", "cie")
ALL_MODES = ("intra", "inter")
SWEEP_COLUMNS = ("executor", "workers", "mode", "n", "uks_per_s", "cs_per_s", "rss_peak", "fallbacks", "valid")


class ConfigError(ValueError):
    pass


class IncompleteRun(RuntimeError):
    pass


class MissingBaseline(KeyError):
    pass


@dataclass
class ExperimentConfig:
    executor: str = "cie"
    n_callbacks: int = 1
    process_mode: str = "intra"
    workers: Optional[int] = None
    publish_period_ns: int = 10 * MS
    duration_s: float = 30.0
    payload_bytes: int = 8
    handler_busywork_ns: int = 0
    sched_attrs: dict[str, SchedAttr] = field(default_factory=dict)
    # Nothing in a run is randomized; the seed labels repeated trials.
    seed: int = 0
    warmup_s: float = 2.0
    strict: bool = True
    staggered: bool = True
    # callback id -> group id, for deliberately merging groups
    group_overrides: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        try:
            ExecutorKind(self.executor)
        except ValueError:
            raise ConfigError(f"unknown executor {self.executor!r}") from None
        if self.process_mode not in ALL_MODES:
            raise ConfigError(f"unknown process mode {self.process_mode!r}")
        if self.n_callbacks < 1:
            raise ConfigError("n_callbacks must be >= 1")
        if self.duration_s < 5:
            raise ConfigError("duration_s must be >= 5")
        if self.publish_period_ns <= 0:
            raise ConfigError("publish_period_ns must be > 0")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def kind(self) -> ExecutorKind:
        return ExecutorKind(self.executor)

    @property
    def effective_workers(self) -> int:
        if self.kind is ExecutorKind.MULTI:
            return self.workers or hardware_concurrency()
        if self.kind is ExecutorKind.SINGLE:
            return 1
        per_process = self.n_callbacks if self.process_mode == "inter" else 2 * self.n_callbacks
        return per_process

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["sched_attrs"] = {k: v.to_dict() for k, v in self.sched_attrs.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        d["sched_attrs"] = {k: SchedAttr.from_dict(v) for k, v in d.get("sched_attrs", {}).items()}
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def build_nodes(config: ExperimentConfig) -> list[NodeSpec]:
    nodes = benchmark_pair(config.n_callbacks, config.publish_period_ns, payload_bytes=config.payload_bytes,
                           busywork_ns=config.handler_busywork_ns, staggered=config.staggered,
                           sched=config.sched_attrs)
    for node in nodes:
        for cb in node.callbacks:
            if cb.id in config.group_overrides:
                cb.group = config.group_overrides[cb.id]
    return nodes


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    report: Optional[RateReport]
    callbacks: dict[str, dict[str, Any]] = field(default_factory=dict)
    valid: bool = True
    error: str = ""
    per_process: list[RateReport] = field(default_factory=list)
    delivery_crossings: int = 0
    timer_firings: int = 0
    shared_lock_acquisitions: int = 0
    baseline_ratios: dict[str, float] = field(default_factory=dict)

    @property
    def fallback_count(self) -> int:
        return sum(1 for c in self.callbacks.values()
                   if c.get("enforcement") and c["enforcement"]["kind"] == "fallback")

    @property
    def unenforced(self) -> bool:
        requested = [c for c in self.callbacks.values() if c.get("enforcement")]
        return bool(requested) and all(c["enforcement"]["kind"] == "fallback" for c in requested)

    def csv_row(self) -> dict[str, Any]:
        r = self.report
        return {
            "executor": self.config.executor,
            "workers": self.config.effective_workers,
            "mode": self.config.process_mode,
            "n": self.config.n_callbacks,
            "uks_per_s": f"{r.user_kernel_switches_per_s:.3f}" if r else "",
            "cs_per_s": f"{r.context_switches_per_s:.3f}" if r else "",
            "rss_peak": r.rss_peak_bytes if r else "",
            "fallbacks": self.fallback_count,
            "valid": "true" if self.valid else "false",
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "report": self.report.to_dict() if self.report else None,
            "per_process": [p.to_dict() for p in self.per_process],
            "callbacks": self.callbacks,
            "valid": self.valid,
            "error": self.error,
            "fallback_count": self.fallback_count,
            "unenforced": self.unenforced,
            "delivery_crossings": self.delivery_crossings,
            "timer_firings": self.timer_firings,
            "shared_lock_acquisitions": self.shared_lock_acquisitions,
            "baseline_ratios": self.baseline_ratios,
        }


def _samples_to_json(samples: Sequence[MetricsSample]) -> list[list[int]]:
    return [[s.t_ns, s.voluntary_cs, s.involuntary_cs, s.kernel_crossings, s.rss_bytes] for s in samples]


def _samples_from_json(rows) -> list[MetricsSample]:
    return [MetricsSample(*r) for r in rows]


def _check_strict(config: ExperimentConfig, nodes: list[NodeSpec]) -> None:
    if config.kind is ExecutorKind.ISOLATED and config.strict:
        # Constructing the executor validates group sizes without spawning anything.
        CallbackIsolatedExecutor(nodes, Domain(), strict=True)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run one cell: warm up, measure ``duration_s``, shut down, summarize.

    Raises ConfigError / IsolationError before anything runs when the
    configuration is refused. Runs with a callback that never executed come
    back with ``valid=False``.
    """
    config.validate()
    nodes = build_nodes(config)
    _check_strict(config, nodes)
    if config.process_mode == "intra":
        result = _run_intra(config, nodes)
    else:
        result = _run_inter(config, nodes)
    idle = [cid for cid, c in result.callbacks.items() if c["executions"] == 0]
    if idle and result.valid:
        result.valid = False
        result.error = f"IncompleteRun: callbacks never executed: {', '.join(idle)}"
    return result


def _stats_dicts(stats, first=None, last=None) -> dict[str, dict[str, Any]]:
    out = {cid: s.to_dict() for cid, s in stats.items()}
    if first is not None and last is not None:
        for cid, d in out.items():
            d["window_executions"] = last[cid].executions - first[cid].executions
    return out


def _timer_firings(callbacks: dict[str, dict[str, Any]]) -> int:
    return sum(c["executions"] for cid, c in callbacks.items() if cid.startswith("timer_"))


def _run_intra(config: ExperimentConfig, nodes: list[NodeSpec]) -> ExperimentResult:
    domain = Domain()
    before = counters.snapshot()
    ex = make_executor(config.kind, nodes, domain, workers=config.workers, strict=config.strict)
    ex.start()
    try:
        time.sleep(config.warmup_s)
        first = ex.stats()
        samples = Sampler(0.1).run_for(config.duration_s)
        last = ex.stats()
    finally:
        stats = ex.shutdown()
        domain.close()
    after = counters.snapshot()
    callbacks = _stats_dicts(stats, first, last)
    report = aggregate([samples], fallback_count=ex.fallback_count)
    return ExperimentResult(
        config, report, callbacks, per_process=[report],
        delivery_crossings=(after["transport_writes"] - before["transport_writes"])
        + (after["transport_reads"] - before["transport_reads"]),
        timer_firings=_timer_firings(callbacks),
        shared_lock_acquisitions=after["shared_lock_acquisitions"] - before["shared_lock_acquisitions"],
    )


def _run_inter(config: ExperimentConfig, nodes: list[NodeSpec]) -> ExperimentResult:
    pub_node, sub_node = nodes
    domain = Domain()
    before = counters.snapshot()
    with tempfile.TemporaryDirectory(prefix="isoexec-") as tmp:
        path = os.path.join(tmp, "pub.sock")
        server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        server.bind(path)
        server.listen(1)
        env = dict(os.environ, **{CELL_ENV: json.dumps(config.to_dict())})
        child = subprocess.Popen(
            [sys.executable, "-m", "isoexec.cli", "run", "--role", "subscriber", "--connect", path],
            env=env, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        ex = None
        try:
            endpoint = domain.accept_subscriber(server, timeout=30)
            ex = make_executor(config.kind, [pub_node], domain, workers=config.workers, strict=config.strict)
            ex.start()
            time.sleep(config.warmup_s)
            endpoint.send_control(b'{"event": "start"}')
            first = ex.stats()
            samples = Sampler(0.1).run_for(config.duration_s)
            last = ex.stats()
            endpoint.send_control(b'{"event": "stop"}')
        except BaseException:
            child.kill()
            if ex is not None:
                ex.shutdown()
            raise
        finally:
            server.close()
        stats = ex.shutdown()
        domain.close()
        out, err = child.communicate(timeout=60)
    after = counters.snapshot()
    if child.returncode != 0:
        raise subprocess.SubprocessError(f"subscriber process exited {child.returncode}: {err.strip()[-2000:]}")
    child_doc = json.loads(out.strip().splitlines()[-1])
    child_samples = _samples_from_json(child_doc["samples"])
    callbacks = _stats_dicts(stats, first, last)
    callbacks.update(child_doc["callbacks"])
    fallbacks = ex.fallback_count + child_doc["fallback_count"]
    report = aggregate([samples, child_samples], fallback_count=fallbacks)
    mine = aggregate([samples])
    theirs = aggregate([child_samples])
    child_delivery = child_doc["counters"]["transport_writes"] + child_doc["counters"]["transport_reads"]
    return ExperimentResult(
        config, report, callbacks, per_process=[mine, theirs],
        delivery_crossings=(after["transport_writes"] - before["transport_writes"])
        + (after["transport_reads"] - before["transport_reads"]) + child_delivery,
        timer_firings=_timer_firings(callbacks),
        shared_lock_acquisitions=after["shared_lock_acquisitions"] - before["shared_lock_acquisitions"]
        + child_doc["counters"]["shared_lock_acquisitions"],
    )


def run_subscriber(config: ExperimentConfig, connect: str) -> dict[str, Any]:
    """Child side of an inter-process cell; returns the JSON-able report."""
    _, sub_node = build_nodes(config)
    domain = Domain()
    events = {name: threading.Event() for name in ("start", "stop", "eof")}

    def on_control(payload: bytes) -> None:
        ev = json.loads(payload).get("event")
        if ev in events:
            events[ev].set()
        if ev == "eof":
            events["stop"].set()

    domain.control_handler = on_control
    before = counters.snapshot()
    ex = make_executor(config.kind, [sub_node], domain, workers=config.workers, strict=config.strict)
    ex.start()
    topics = [cb.kind.topic for cb in sub_node.callbacks]
    domain.connect_to_publisher(connect, topics)
    samples: list[MetricsSample] = []
    first = last = None
    if events["start"].wait(config.warmup_s + 60):
        first = ex.stats()
        samples = Sampler(0.1).run_for(config.duration_s + 60, stop=events["stop"])
        last = ex.stats()
    events["eof"].wait(60)
    stats = ex.shutdown()
    domain.close()
    after = counters.snapshot()
    return {
        "samples": _samples_to_json(samples),
        "callbacks": _stats_dicts(stats, first, last),
        "fallback_count": ex.fallback_count,
        "counters": {k: after[k] - before[k] for k in after},
    }


# --- sweeps ---------------------------------------------------------------------

@dataclass(frozen=True)
class Cell:
    executor: str
    mode: str
    n: int


def cells(n_list: Iterable[int], executors: Iterable[str], modes: Iterable[str]) -> list[Cell]:
    n_list, executors, modes = list(n_list), list(executors), list(modes)
    if not n_list or not executors or not modes:
        raise ConfigError("sweep lists must be non-empty")
    return [Cell(e, m, n) for m in modes for n in n_list for e in executors]


def sweep(base: ExperimentConfig, n_list: Iterable[int] = DEFAULT_N_LIST,
          executors: Iterable[str] = ALL_EXECUTORS, modes: Iterable[str] = ALL_MODES, *,
          gap_s: float = 1.0, progress: Optional[Callable[[int, int, ExperimentResult], None]] = None,
          runner: Callable[[ExperimentConfig], ExperimentResult] = run_experiment) -> list[ExperimentResult]:
    """Run the cross product one cell at a time; a failing cell is recorded
    as invalid and the sweep carries on."""
    plan = cells(n_list, executors, modes)
    results: list[ExperimentResult] = []
    for i, cell in enumerate(plan):
        cfg = replace(base, executor=cell.executor, process_mode=cell.mode, n_callbacks=cell.n)
        try:
            res = runner(cfg)
        except Exception as exc:  # one broken cell must not sink the sweep
            log.warning("cell %s/%s/N=%d failed: %s", cell.executor, cell.mode, cell.n, exc)
            res = ExperimentResult(cfg, None, valid=False, error=f"{type(exc).__name__}: {exc}")
        results.append(res)
        if progress is not None:
            progress(i + 1, len(plan), res)
        if gap_s and i + 1 < len(plan):
            time.sleep(gap_s)
    return results


def write_sweep_csv(results: Iterable[ExperimentResult], path, force: bool = False) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists (use force to overwrite)")
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(r.csv_row())
    return path


def read_sweep_csv(path) -> list[dict[str, Any]]:
    """Parse a sweep CSV into typed rows. Raises SchemaMismatch on bad input."""
    from .report import SchemaMismatch

    text = Path(path).read_text()
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None or tuple(reader.fieldnames) != SWEEP_COLUMNS:
        raise SchemaMismatch(f"expected header {','.join(SWEEP_COLUMNS)}, got {reader.fieldnames}")
    rows = []
    for raw in reader:
        try:
            rows.append({
                "executor": raw["executor"],
                "workers": int(raw["workers"]),
                "mode": raw["mode"],
                "n": int(raw["n"]),
                "uks_per_s": float(raw["uks_per_s"]) if raw["uks_per_s"] else None,
                "cs_per_s": float(raw["cs_per_s"]) if raw["cs_per_s"] else None,
                "rss_peak": int(raw["rss_peak"]) if raw["rss_peak"] else None,
                "fallbacks": int(raw["fallbacks"]),
                "valid": raw["valid"] == "true",
            })
        except (TypeError, ValueError) as exc:
            raise SchemaMismatch(f"bad row {raw}: {exc}") from exc
    if not rows:
        raise SchemaMismatch("sweep CSV has no rows")
    return rows


def rows_of(results: Iterable[ExperimentResult]) -> list[dict[str, Any]]:
    rows = []
    for r in results:
        rep = r.report
        rows.append({
            "executor": r.config.executor, "workers": r.config.effective_workers,
            "mode": r.config.process_mode, "n": r.config.n_callbacks,
            "uks_per_s": rep.user_kernel_switches_per_s if rep else None,
            "cs_per_s": rep.context_switches_per_s if rep else None,
            "rss_peak": rep.rss_peak_bytes if rep else None,
            "fallbacks": r.fallback_count, "valid": r.valid,
        })
    return rows


METRICS = {"uks": "uks_per_s", "cs": "cs_per_s"}


@dataclass
class RatioReport:
    # (executor, n, mode) -> {"uks": ratio, "cs": ratio}
    cells: dict[tuple[str, int, str], dict[str, float]]
    # (executor, mode, metric) -> max ratio over N
    max_ratio: dict[tuple[str, str, str], float]
    # (executor, mode, metric) -> ratio(largest N) / ratio(N=4, else smallest N)
    flatness: dict[tuple[str, str, str], float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "cells": [{"executor": e, "n": n, "mode": m, **v} for (e, n, m), v in sorted(self.cells.items())],
            "max_ratio": [{"executor": e, "mode": m, "metric": k, "ratio": v}
                          for (e, m, k), v in sorted(self.max_ratio.items())],
            "flatness": [{"executor": e, "mode": m, "metric": k, "value": v}
                         for (e, m, k), v in sorted(self.flatness.items())],
        }


def ratio_report(rows: Sequence[dict[str, Any]], baseline: str = "ste") -> RatioReport:
    """Ratio each valid cell's switch rates against the baseline cell with the same N and mode."""
    base = {(r["n"], r["mode"]): r for r in rows if r["executor"] == baseline and r["valid"]}
    out: dict[tuple[str, int, str], dict[str, float]] = {}
    for r in rows:
        if not r["valid"]:
            continue
        b = base.get((r["n"], r["mode"]))
        if b is None:
            raise MissingBaseline(f"no valid {baseline} cell for N={r['n']} mode={r['mode']}")
        ratios = {}
        for name, col in METRICS.items():
            denom = b[col]
            ratios[name] = (r[col] / denom) if denom else float("inf")
        out[(r["executor"], r["n"], r["mode"])] = ratios
    max_ratio: dict[tuple[str, str, str], float] = {}
    flat: dict[tuple[str, str, str], float] = {}
    series: dict[tuple[str, str], list[int]] = {}
    for (e, n, m) in out:
        series.setdefault((e, m), []).append(n)
    for (e, m), ns in series.items():
        ns.sort()
        for name in METRICS:
            vals = [out[(e, n, m)][name] for n in ns]
            max_ratio[(e, m, name)] = max(vals)
            ref = 4 if 4 in ns else ns[0]
            top = ns[-1]
            if top != ref:
                denom = out[(e, ref, m)][name]
                flat[(e, m, name)] = out[(e, top, m)][name] / denom if denom else float("inf")
    return RatioReport(out, max_ratio, flat)


def attach_ratios(results: Sequence[ExperimentResult], report: RatioReport) -> None:
    for r in results:
        key = (r.config.executor, r.config.n_callbacks, r.config.process_mode)
        if key in report.cells:
            r.baseline_ratios = dict(report.cells[key])
