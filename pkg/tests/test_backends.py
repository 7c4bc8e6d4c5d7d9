import numpy as np
import pytest

from fedtune import backends
from fedtune.backends import (SURROGATE_MAGIC, TABLE_METRICS, Benchmark, GridMiss, LookupTable, Surrogate,
                              fit_surrogate, generate_table, load_seed_log, load_table, quantize)
from fedtune.engine import run_course
from fedtune.space import FidelityVector, builtin_space, grid
from fedtune.sysmodel import BAD_NETWORK, BudgetExhausted, BudgetLedger, course_time

FIDS = [FidelityVector(2, 1.0), FidelityVector(4, 1.0)]


@pytest.fixture(scope="module")
def tiny_table(tmp_path_factory, blobs_task, tiny_space):
    path = tmp_path_factory.mktemp("tables") / "t.csv"
    table = generate_table(blobs_task, "fedavg", tiny_space, FIDS, n_seeds=3, out=path)
    return path, table


def test_table_shape(tiny_table, tiny_space):
    path, table = tiny_table
    assert len(table) == 12
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == tiny_space.names + ["round", "sample_rate", *TABLE_METRICS, "n_seeds"]
    assert len(lines) == 13


def test_course_run_count(blobs_task, tiny_space, monkeypatch):
    calls = []
    real = backends.run_course
    monkeypatch.setattr(backends, "run_course", lambda *a, **k: calls.append(1) or real(*a, **k))
    fids = [FidelityVector(2, 0.6), FidelityVector(2, 1.0)]
    t = generate_table(blobs_task, "fedavg", tiny_space, fids, n_seeds=3)
    assert len(t) == 12 and len(calls) == 36


def test_stored_mean_matches_raw_runs(tiny_table, blobs_task, tiny_space):
    path, table = tiny_table
    seeds = load_seed_log(path, tiny_space)
    for cfg in grid(tiny_space)[::2]:
        for b in FIDS:
            runs = [run_course(blobs_task, "fedavg", cfg, b, seed=s).final.global_metrics for s in range(3)]
            row = table.lookup(cfg, b)
            for m in TABLE_METRICS:
                assert row[m] == quantize(sum(r[m] for r in runs) / 3)
                for s in range(3):
                    assert seeds[table.key(cfg, b) + (s,)][m] == quantize(runs[s][m])


def test_load_roundtrip(tiny_table, tiny_space):
    path, table = tiny_table
    again = load_table(path, tiny_space)
    assert again.rows == table.rows and again.n_seeds == 3
    assert load_table(path).rows == table.rows  # space from the sidecar


def test_resume_complete_does_no_work(tiny_table, blobs_task, tiny_space, monkeypatch):
    path, table = tiny_table
    monkeypatch.setattr(backends, "run_course", lambda *a, **k: pytest.fail("recomputed a row"))
    again = generate_table(blobs_task, "fedavg", tiny_space, FIDS, n_seeds=3, out=path)
    assert again.rows == table.rows


def test_resume_after_interruption(tiny_table, blobs_task, tiny_space, tmp_path):
    path, table = tiny_table
    partial = tmp_path / "p.csv"
    lines = path.read_text().splitlines()
    # keep two complete configs plus a torn line
    partial.write_text("\n".join(lines[:5]) + "\n" + lines[5][:10])
    (tmp_path / "p.csv.seeds.csv").write_text((path.parent / "t.csv.seeds.csv").read_text())
    again = generate_table(blobs_task, "fedavg", tiny_space, FIDS, n_seeds=3, out=partial)
    assert again.rows == table.rows
    assert partial.read_text() == path.read_text()


def test_job_cap(blobs_task, tiny_space):
    with pytest.raises(ValueError, match="cap"):
        generate_table(blobs_task, "fedavg", tiny_space, FIDS, n_seeds=3, job_cap=10)


def test_tabular_evaluate(tiny_table, blobs_task, tiny_space):
    _, table = tiny_table
    bench = Benchmark(blobs_task, "fedavg", tiny_space, "tabular", table=table)
    cfg = grid(tiny_space)[3]
    ledger = BudgetLedger(1e6)
    res = bench.evaluate(cfg, FidelityVector(4, 1.0), ledger=ledger)
    assert res.metrics == table.lookup(cfg, FidelityVector(4, 1.0))
    expected = course_time(bench.system_for(cfg), 5, FidelityVector(4, 1.0))
    assert res.elapsed == pytest.approx(expected) and ledger.spent == pytest.approx(expected)
    with pytest.raises(GridMiss):
        bench.evaluate({**cfg, "learning_rate": 0.02}, FidelityVector(4, 1.0))
    with pytest.raises(GridMiss):
        bench.evaluate(cfg, FidelityVector(3, 1.0))


def test_ledger_truncation_and_exhaustion(tiny_table, blobs_task, tiny_space):
    _, table = tiny_table
    bench = Benchmark(blobs_task, "fedavg", tiny_space, "tabular", table=table)
    cfg = grid(tiny_space)[0]
    per_round = course_time(bench.system_for(cfg), 5, FidelityVector(1, 1.0))
    ledger = BudgetLedger(3.5 * per_round)
    res = bench.evaluate(cfg, FidelityVector(4, 1.0), ledger=ledger)
    assert res.truncated and res.fidelity.rounds == 2  # largest table round that fits
    with pytest.raises(BudgetExhausted):
        bench.evaluate(cfg, FidelityVector(4, 1.0), ledger=ledger)


def test_raw_evaluate_matches_course(blobs_task, tiny_space):
    bench = Benchmark(blobs_task, "fedavg", tiny_space, "raw")
    cfg = grid(tiny_space)[4]
    res = bench.evaluate(cfg, FidelityVector(3, 1.0), seed=2)
    assert res.metrics == run_course(blobs_task, "fedavg", cfg, FidelityVector(3, 1.0), seed=2).final.global_metrics


def _synthetic_table(fn):
    space = builtin_space("lr", "fedavg")
    fids = [FidelityVector(1, 1.0)]
    table = LookupTable(space, fids, n_seeds=1)
    for cfg in grid(space)[::4]:
        table.rows[table.key(cfg, fids[0])] = {m: fn(cfg) for m in TABLE_METRICS}
    return table


def test_surrogate_constant_target():
    table = _synthetic_table(lambda c: 0.7)
    sur, mae = fit_surrogate(table)
    assert mae == 0.0
    cfg = builtin_space("lr", "fedavg").sample(np.random.default_rng(1))
    assert sur.predict(cfg, FidelityVector(1, 1.0))["valid_loss"] == 0.7


def test_surrogate_step_target():
    table = _synthetic_table(lambda c: float(c["step_size"] >= 3))
    _, mae = fit_surrogate(table)
    assert mae <= 0.05


def test_surrogate_deterministic_and_persisted(tmp_path):
    table = _synthetic_table(lambda c: np.log10(c["learning_rate"]) + c["step_size"])
    a, _ = fit_surrogate(table, seed=4)
    b, _ = fit_surrogate(table, seed=4)
    cfgs, fids, _ = table.as_arrays()
    pa = a.predict_many(cfgs, fids)
    assert np.array_equal(pa, b.predict_many(cfgs, fids))
    a.save(tmp_path / "s.srg")
    assert (tmp_path / "s.srg").read_bytes()[:8] == SURROGATE_MAGIC
    back = Surrogate.load(tmp_path / "s.srg")
    for m in TABLE_METRICS:
        assert np.array_equal(back.predict_many(cfgs, fids, m), a.predict_many(cfgs, fids, m))
    (tmp_path / "bad.srg").write_bytes(b"NOTMAGIC" + bytes(16))
    with pytest.raises(ValueError):
        Surrogate.load(tmp_path / "bad.srg")


def test_surrogate_needs_rows(tiny_table):
    _, table = tiny_table
    with pytest.raises(ValueError, match="at least 20"):
        fit_surrogate(table)


def test_benchmark_mode_requirements(blobs_task, tiny_space):
    with pytest.raises(ValueError):
        Benchmark(blobs_task, "fedavg", tiny_space, "tabular")
    with pytest.raises(ValueError):
        Benchmark(blobs_task, "fedavg", tiny_space, "cloud")


def test_evaluate_does_not_mutate_handle(tiny_table, blobs_task, tiny_space):
    _, table = tiny_table
    bench = Benchmark(blobs_task, "fedavg", tiny_space, "tabular", BAD_NETWORK, table=table)
    before = dict(table.rows)
    bench.evaluate(grid(tiny_space)[1], FidelityVector(2, 1.0), ledger=BudgetLedger(1e9))
    assert table.rows == before
