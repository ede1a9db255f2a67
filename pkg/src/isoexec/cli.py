"""Command-line entry point.

Exit codes: 0 ok, 1 domain violation (constraint breach, refused run, no
valid sweep cells), 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional

from . import bench, schedctl
from .executors import IsolationError
from .model import CycleError, DanglingTopicWarning, ModelError, build_graph, load_system, \
    validate_isolation_constraints
from .report import SchemaMismatch, render_report

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}") from None


def _load_config_file(path: Optional[str]) -> dict[str, Any]:
    if not path:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    return doc


def _merged(args, file_cfg: dict[str, Any], name: str, default):
    """Flag value if given on the command line, else config file, else default."""
    val = getattr(args, name, None)
    if val is not None:
        return val
    return file_cfg.get(name, default)


def cmd_validate(args) -> int:
    try:
        nodes = load_system(args.path)
    except (OSError, ModelError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DanglingTopicWarning)
        try:
            graph = build_graph(nodes)
        except CycleError as exc:
            print(f"cycle: {' -> '.join(exc.cycle)}")
            return EXIT_VIOLATION
        except ModelError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    for w in caught:
        print(f"warning: {w.message}")
    print(f"callbacks: {len(graph.vertices)}, edges: {len(graph.edges)}")
    print("topological order: " + " ".join(graph.topo_order))
    report = validate_isolation_constraints(nodes, graph)
    for v in report:
        print(f"violation [{v.kind}]: {v}")
    if report:
        return EXIT_VIOLATION
    print("ok")
    return EXIT_OK


def cmd_probe(args) -> int:
    print(json.dumps(schedctl.probe_capabilities().to_dict(), indent=2))
    return EXIT_OK


def _base_config(args, file_cfg: dict[str, Any]) -> bench.ExperimentConfig:
    cfg = bench.ExperimentConfig.from_dict({k: v for k, v in file_cfg.items()
                                            if k in bench.ExperimentConfig.__dataclass_fields__})
    overrides = {
        "duration_s": getattr(args, "duration", None),
        "workers": getattr(args, "workers", None),
        "publish_period_ns": getattr(args, "period_ns", None),
        "payload_bytes": getattr(args, "payload_bytes", None),
        "handler_busywork_ns": getattr(args, "busywork_ns", None),
        "warmup_s": getattr(args, "warmup", None),
        "seed": getattr(args, "seed", None),
    }
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def cmd_run(args) -> int:
    if args.role == "subscriber":
        raw = os.environ.get(bench.CELL_ENV)
        if not raw or not args.connect:
            print(f"error: subscriber role needs {bench.CELL_ENV} and --connect", file=sys.stderr)
            return EXIT_USAGE
        cfg = bench.ExperimentConfig.from_dict(json.loads(raw))
        print(json.dumps(bench.run_subscriber(cfg, args.connect)))
        return EXIT_OK
    file_cfg = _load_config_file(args.config)
    cfg = _base_config(args, file_cfg)
    cfg = replace(cfg,
                  executor=_merged(args, file_cfg, "executor", cfg.executor),
                  n_callbacks=_merged(args, file_cfg, "n", cfg.n_callbacks),
                  process_mode=_merged(args, file_cfg, "mode", cfg.process_mode))
    try:
        result = bench.run_experiment(cfg)
    except bench.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IsolationError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    print(json.dumps(result.to_dict(), indent=2))
    return EXIT_OK if result.valid else EXIT_VIOLATION


def cmd_sweep(args) -> int:
    file_cfg = _load_config_file(args.config)
    base = _base_config(args, file_cfg)
    executors = _merged(args, file_cfg, "executors", list(bench.ALL_EXECUTORS))
    n_list = _merged(args, file_cfg, "n_list", list(bench.DEFAULT_N_LIST))
    modes = _merged(args, file_cfg, "modes", list(bench.ALL_MODES))
    out = Path(_merged(args, file_cfg, "out", "sweep.csv"))
    force = args.force or bool(file_cfg.get("force", False))
    if out.exists() and not force:
        print(f"error: {out} exists; pass --force to overwrite", file=sys.stderr)
        return EXIT_USAGE
    try:
        base.validate()
        bench.cells(n_list, executors, modes)
    except bench.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    def progress(i: int, total: int, res: bench.ExperimentResult) -> None:
        c = res.config
        status = "ok" if res.valid else f"INVALID {res.error}"
        rate = f"cs/s={res.report.context_switches_per_s:.0f}" if res.report else ""
        print(f"[{i}/{total}] {c.executor} {c.process_mode} N={c.n_callbacks} {rate} {status}", flush=True)

    results = bench.sweep(base, n_list, executors, modes, progress=progress)
    bench.write_sweep_csv(results, out, force=True)
    print(f"wrote {out}")
    return EXIT_OK if any(r.valid for r in results) else EXIT_VIOLATION


def cmd_report(args) -> int:
    try:
        rows = bench.read_sweep_csv(args.csv)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaMismatch as exc:
        print(f"error: schema mismatch: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out_dir or Path(args.csv).with_suffix(""))
    files = render_report(rows, out_dir)
    for f in files:
        print(f"wrote {f}")
    print((out_dir / "summary.txt").read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isoexec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a JSON system description")
    v.add_argument("path")
    v.set_defaults(func=cmd_validate)

    pr = sub.add_parser("probe", help="print scheduler capabilities as JSON")
    pr.set_defaults(func=cmd_probe)

    def common(sp):
        sp.add_argument("--config", help="JSON file with defaults for any flag")
        sp.add_argument("--duration", type=float, help="measured seconds per cell (>= 5)")
        sp.add_argument("--workers", type=int, help="multi-threaded executor workers (default: cpu count)")
        sp.add_argument("--period-ns", type=int, dest="period_ns")
        sp.add_argument("--payload-bytes", type=int, dest="payload_bytes")
        sp.add_argument("--busywork-ns", type=int, dest="busywork_ns")
        sp.add_argument("--warmup", type=float, help="excluded warm-up seconds (default 2)")
        sp.add_argument("--seed", type=int)

    r = sub.add_parser("run", help="run one experiment cell")
    common(r)
    r.add_argument("--executor", choices=bench.ALL_EXECUTORS)
    r.add_argument("-n", type=int, dest="n")
    r.add_argument("--mode", choices=bench.ALL_MODES)
    r.add_argument("--role", choices=("runner", "subscriber"), default="runner", help=argparse.SUPPRESS)
    r.add_argument("--connect", help=argparse.SUPPRESS)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run the executor x N x mode cross product")
    common(s)
    s.add_argument("--executors", type=_csv_list)
    s.add_argument("--n-list", type=_int_list, dest="n_list")
    s.add_argument("--modes", type=_csv_list)
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("report", help="plot a sweep CSV and summarize ratios")
    rp.add_argument("csv")
    rp.add_argument("--out-dir")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
