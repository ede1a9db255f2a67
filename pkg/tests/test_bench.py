from dataclasses import replace

import pytest

from isoexec.bench import (SWEEP_COLUMNS, ConfigError, ExperimentConfig, ExperimentResult, MissingBaseline, cells,
                           read_sweep_csv, ratio_report, rows_of, run_experiment, sweep, write_sweep_csv)
from isoexec.executors import IsolationError
from isoexec.metrics import RateReport
from isoexec.report import SchemaMismatch


@pytest.mark.parametrize("bad", [
    dict(n_callbacks=0), dict(duration_s=4.9), dict(publish_period_ns=0),
    dict(executor="nope"), dict(process_mode="both"), dict(workers=0),
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        replace(ExperimentConfig(), **bad).validate()


def test_defaults():
    cfg = ExperimentConfig()
    cfg.validate()
    assert (cfg.publish_period_ns, cfg.duration_s, cfg.payload_bytes, cfg.handler_busywork_ns,
            cfg.warmup_s) == (10_000_000, 30.0, 8, 0, 2.0)


def test_config_round_trip():
    cfg = ExperimentConfig(executor="mte", n_callbacks=3, workers=2, seed=7)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_full_grid_has_42_cells():
    plan = cells((1, 4, 8, 12, 16, 20, 24), ("ste", "mte", "cie"), ("intra", "inter"))
    assert len(plan) == 42
    assert len(set(plan)) == 42


def _fake_result(cfg, cs=None):
    cs = cs if cs is not None else {"ste": 100.0, "mte": 300.0, "cie": 400.0}[cfg.executor] * cfg.n_callbacks
    return ExperimentResult(cfg, RateReport(5.0, cs / 2, cs, 10_000_000 + cfg.n_callbacks, 0),
                            {"x": {"executions": 1}})


def test_sweep_survives_a_crashing_cell():
    def runner(cfg):
        if (cfg.executor, cfg.process_mode, cfg.n_callbacks) == ("mte", "inter", 12):
            raise RuntimeError("subscriber died")
        return _fake_result(cfg)

    seen = []
    results = sweep(ExperimentConfig(duration_s=5), gap_s=0, runner=runner,
                    progress=lambda i, total, r: seen.append((i, total)))
    assert len(results) == 42
    bad = [r for r in results if not r.valid]
    assert len(bad) == 1 and "subscriber died" in bad[0].error
    assert seen[-1] == (42, 42)


def test_single_cell_sweep_equals_direct_run():
    base = ExperimentConfig(duration_s=5)
    [res] = sweep(base, [4], ["cie"], ["intra"], gap_s=0, runner=_fake_result)
    direct = _fake_result(replace(base, executor="cie", n_callbacks=4, process_mode="intra"))
    assert res.csv_row() == direct.csv_row()


def test_sweep_csv_round_trip(tmp_path):
    results = sweep(ExperimentConfig(duration_s=5), [1, 4], ["ste", "cie"], ["intra"], gap_s=0, runner=_fake_result)
    path = write_sweep_csv(results, tmp_path / "s.csv")
    assert path.read_text().splitlines()[0] == ",".join(SWEEP_COLUMNS)
    assert read_sweep_csv(path) == rows_of(results)
    with pytest.raises(FileExistsError):
        write_sweep_csv(results, path)


def test_empty_csv_is_a_schema_mismatch(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(SchemaMismatch):
        read_sweep_csv(p)
    p.write_text("a,b\n1,2\n")
    with pytest.raises(SchemaMismatch):
        read_sweep_csv(p)


def test_baseline_ratios_are_one():
    results = sweep(ExperimentConfig(duration_s=5), [4, 24], ["ste", "cie"], ["intra"], gap_s=0, runner=_fake_result)
    rep = ratio_report(rows_of(results))
    for n in (4, 24):
        assert rep.cells[("ste", n, "intra")] == {"uks": 1.0, "cs": 1.0}
        assert rep.cells[("cie", n, "intra")]["cs"] == pytest.approx(4.0)
    assert rep.max_ratio[("cie", "intra", "cs")] == pytest.approx(4.0)
    assert rep.flatness[("cie", "intra", "cs")] == pytest.approx(1.0)


def test_missing_baseline():
    results = sweep(ExperimentConfig(duration_s=5), [4], ["cie"], ["intra"], gap_s=0, runner=_fake_result)
    with pytest.raises(MissingBaseline):
        ratio_report(rows_of(results))


def test_unenforced_flag():
    cfg = ExperimentConfig()
    fb = {"kind": "fallback"}
    res = ExperimentResult(cfg, None, {"a": {"executions": 1, "enforcement": fb},
                                       "b": {"executions": 1, "enforcement": fb}})
    assert res.unenforced and res.fallback_count == 2
    res.callbacks["b"]["enforcement"] = {"kind": "applied"}
    assert not res.unenforced and res.fallback_count == 1


def test_strict_isolated_refuses_shared_group_before_running():
    cfg = ExperimentConfig(executor="cie", n_callbacks=4, duration_s=5,
                           group_overrides={"timer_0": "g_shared", "timer_1": "g_shared"})
    with pytest.raises(IsolationError):
        run_experiment(cfg)


@pytest.mark.slow
def test_single_threaded_one_callback_rate():
    res = run_experiment(ExperimentConfig(executor="ste", n_callbacks=1, process_mode="intra", duration_s=10))
    assert res.valid, res.error
    assert 900 <= res.callbacks["sub_0"]["window_executions"] <= 1100


@pytest.mark.slow
def test_isolated_inter_process_thread_identity():
    res = run_experiment(ExperimentConfig(executor="cie", n_callbacks=24, process_mode="inter",
                                          duration_s=5, warmup_s=1))
    assert res.valid, res.error
    assert len(res.callbacks) == 48
    owners = [c["thread_ids"] for c in res.callbacks.values()]
    assert all(len(t) == 1 for t in owners)
    assert len({t[0] for t in owners}) == 48
    assert len(res.per_process) == 2
    assert res.report.context_switches_per_s == pytest.approx(
        sum(p.context_switches_per_s for p in res.per_process))
