import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from isoexec.bench import SWEEP_COLUMNS
from isoexec.cli import main

SYSTEMS = Path(__file__).resolve().parent.parent / "systems"


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "isoexec.cli", *args], capture_output=True, text=True, timeout=300)


def test_validate_benchmark_description(capsys):
    assert main(["validate", str(SYSTEMS / "benchmark_pair_n4.json")]) == 0
    out = capsys.readouterr().out
    assert "callbacks: 8, edges: 4" in out and out.rstrip().endswith("ok")


def test_validate_shared_group(capsys):
    assert main(["validate", str(SYSTEMS / "shared_group.json")]) == 1
    assert "group-size" in capsys.readouterr().out


def test_validate_cycle(capsys):
    assert main(["validate", str(SYSTEMS / "cyclic.json")]) == 1
    assert "cycle:" in capsys.readouterr().out


def test_validate_unreadable(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["validate", str(bad)]) == 2


def test_usage_errors_exit_2():
    assert main([]) == 2
    assert main(["sweep", "--n-list", "1,x"]) == 2
    assert main(["run", "--executor", "nope"]) == 2


def test_probe_prints_json():
    proc = _cli("probe")
    assert proc.returncode == 0
    doc = json.loads(proc.stdout)
    assert {"deadline", "fifo_rt", "fair", "cores"} <= set(doc)


def test_run_refuses_short_duration(capsys):
    assert main(["run", "--executor", "ste", "--duration", "1"]) == 2


def test_sweep_refuses_to_clobber(tmp_path, capsys):
    out = tmp_path / "s.csv"
    out.write_text("keep me")
    assert main(["sweep", "--n-list", "1", "--out", str(out)]) == 2
    assert out.read_text() == "keep me"


@pytest.mark.slow
def test_single_n_sweep_produces_six_rows(tmp_path):
    out = tmp_path / "s.csv"
    proc = _cli("sweep", "--n-list", "1", "--duration", "5", "--warmup", "0.5", "--out", str(out))
    assert proc.returncode == 0, proc.stderr
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 6
    assert tuple(rows[0]) == SWEEP_COLUMNS
    assert {(r["executor"], r["mode"]) for r in rows} == {(e, m) for e in ("ste", "mte", "cie")
                                                          for m in ("intra", "inter")}
    assert all(r["valid"] == "true" for r in rows)

    rep = tmp_path / "rep"
    proc = _cli("report", str(out), "--out-dir", str(rep))
    assert proc.returncode == 0, proc.stderr
    assert "max CIE/STE context switches ratio (intra)" in proc.stdout


def _write_rows(path, rows):
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _row(executor, mode, n, cs):
    return {"executor": executor, "workers": 1, "mode": mode, "n": n, "uks_per_s": cs / 2, "cs_per_s": cs,
            "rss_peak": 20_000_000 + n * 100_000, "fallbacks": 0, "valid": "true"}


def test_report_structure(tmp_path, capsys):
    csv_path = tmp_path / "s.csv"
    rows = [_row(e, m, n, {"ste": 100, "mte": 250, "cie": 300}[e] * n)
            for e in ("ste", "mte", "cie") for m in ("intra", "inter") for n in (1, 4, 24)]
    _write_rows(csv_path, rows)
    out_dir = tmp_path / "rep"
    assert main(["report", str(csv_path), "--out-dir", str(out_dir)]) == 0
    names = sorted(p.name for p in out_dir.iterdir())
    assert names == ["context_switches.svg", "memory.svg", "summary.txt", "user_kernel_switches.svg"]
    for svg in ("context_switches.svg", "memory.svg", "user_kernel_switches.svg"):
        text = (out_dir / svg).read_text()
        assert text.startswith("<svg") and text.count('class="series"') == 6
    summary = (out_dir / "summary.txt").read_text()
    assert "max CIE/STE context switches ratio (intra): 3.00x" in summary
    assert "flatness CIE/STE context switches (inter), ratio(N_max)/ratio(N=4): 1.00" in summary


def test_report_baseline_only(tmp_path, capsys):
    csv_path = tmp_path / "s.csv"
    _write_rows(csv_path, [_row("ste", "intra", n, 100 * n) for n in (1, 4)])
    assert main(["report", str(csv_path), "--out-dir", str(tmp_path / "r")]) == 0
    assert "baseline only" in capsys.readouterr().out


def test_report_empty_csv(tmp_path, capsys):
    p = tmp_path / "empty.csv"
    p.write_text("")
    assert main(["report", str(p)]) == 2
    assert "schema mismatch" in capsys.readouterr().err
