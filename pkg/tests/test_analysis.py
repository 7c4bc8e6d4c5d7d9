import csv
import itertools
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedtune.analysis import best_seen, ecdf, mean_rank, report, run_study, sign_test
from fedtune.config import parse_config


def rec(t, loss, rounds=27):
    return {"sim_time": t, "metrics": {"valid_loss": loss}, "fidelity": {"round": rounds, "sample_rate": 1.0}}


def test_best_seen_examples():
    assert best_seen([rec(5, 0.3)], [1, 10]) == [math.inf, 0.3]
    assert best_seen([rec(1, 0.5), rec(2, 0.7)], [1, 2, 3]) == [0.5, 0.5, 0.5]
    trials = [rec(1, 0.9), rec(2, 0.4), rec(3, 0.6)]
    assert best_seen(trials, [10])[0] == min(t["metrics"]["valid_loss"] for t in trials)


def test_best_seen_prefers_higher_fidelity():
    trials = [rec(1, 0.5, rounds=1), rec(2, 0.6, rounds=27), rec(3, 0.3, rounds=27), rec(4, 0.1, rounds=1)]
    # the cheap 0.1 cannot displace a full-fidelity incumbent
    assert best_seen(trials, [1, 2, 3, 4]) == [0.5, 0.5, 0.3, 0.3]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.sampled_from([1, 3, 9, 27])), min_size=1, max_size=30))
def test_best_seen_monotone(items):
    trials = [rec(i + 1, l, r) for i, (l, r) in enumerate(items)]
    curve = best_seen(trials, np.linspace(0, len(items) + 1, 50))
    assert all(a >= b for a, b in zip(curve, curve[1:]))


def test_mean_rank_examples():
    r = mean_rank({"a": [[0.1]], "b": [[0.2]]})
    assert r["a"][0] == 1 and r["b"][0] == 2
    r = mean_rank({"a": [[0.1]], "b": [[0.1]], "c": [[0.3]]})
    assert (r["a"][0], r["b"][0], r["c"][0]) == (1.5, 1.5, 3.0)
    with pytest.raises(ValueError):
        mean_rank({"a": [[0.1]]})
    with pytest.raises(ValueError):
        mean_rank({"a": [[0.1, 0.2]], "b": [[0.1]]})


@settings(max_examples=100, deadline=None)
@given(k=st.integers(2, 6), problems=st.integers(1, 5), times=st.integers(1, 6), data=st.data())
def test_mean_rank_conserves_rank_sum(k, problems, times, data):
    vals = st.sampled_from([0.1, 0.2, 0.3, math.inf])
    curves = {f"o{i}": [[data.draw(vals) for _ in range(times)] for _ in range(problems)] for i in range(k)}
    ranks = mean_rank(curves)
    total = sum(ranks.values())
    assert np.allclose(total / k, (k + 1) / 2)


def brute_force_p(wins, losses):
    n = wins + losses
    hits = sum(1 for seq in itertools.product((0, 1), repeat=n) if sum(seq) >= wins)
    return Fraction(hits, 2 ** n)


def test_sign_test_matches_enumeration():
    for n in range(1, 13):
        for w in range(n + 1):
            assert sign_test(w, 3, n - w) == float(brute_force_p(w, n - w))


def test_sign_test_examples():
    assert sign_test(16, 0, 4) == pytest.approx(6196 / 1048576, abs=1e-12)
    assert abs(sign_test(16, 0, 4) - 0.005909) < 1e-6
    assert sign_test(10, 0, 10) == pytest.approx(0.5 + math.comb(20, 10) / 2 ** 21)
    assert sign_test(1, 0, 0) == 0.5
    with pytest.raises(ValueError):
        sign_test(0, 5, 0)


def test_ecdf_examples():
    pts = ecdf([0.1, 0.2, 0.3])
    assert [p[0] for p in pts] == pytest.approx([0.0, 0.5, 1.0])
    assert [p[1] for p in pts] == pytest.approx([1 / 3, 2 / 3, 1.0])
    with pytest.raises(ValueError):
        ecdf([0.4, 0.4])


@settings(max_examples=100, deadline=None)
@given(vals=st.lists(st.integers(0, 20), min_size=2, max_size=30).filter(lambda v: len(set(v)) > 1),
       scale=st.sampled_from([0.5, 2.0, 8.0]), shift=st.sampled_from([-3.0, 0.0, 7.5]))
def test_ecdf_affine_invariant(vals, scale, shift):
    a = ecdf([float(v) for v in vals])
    b = ecdf([v * scale + shift for v in vals])
    assert len(a) == len(b)
    for (x1, f1), (x2, f2) in zip(a, b):
        assert x1 == pytest.approx(x2) and f1 == f2
    assert a[0][0] == 0.0 and a[-1][1] == 1.0
    assert all(f1 <= f2 for (_, f1), (_, f2) in zip(a, a[1:]))


def study_raw(tmp_path, optimizers, reps=5, extra=None):
    raw = {
        "tasks": [
            {"id": f"t{i}", "family": "lr", "source": {"kind": "synth", "n_samples": 120, "n_features": 4,
                                                       "n_classes": 2, "seed": i}}
            for i in range(2)
        ],
        "algorithms": ["fedavg"],
        "mode": "raw",
        "fidelity": {"rounds": [1, 3]},
        "spaces": {"lr": {"dimensions": [
            {"name": "learning_rate", "kind": "continuous", "lo": 0.01, "hi": 1.0, "log": True, "bins": 3},
            {"name": "batch_size", "kind": "integer", "lo": 8, "hi": 32, "log": True, "bins": 3},
        ]}},
        "optimizers": optimizers,
        "budget_full_courses": 3,
        "repetitions": reps,
        "seed": 0,
    }
    raw.update(extra or {})
    return parse_config(raw, tmp_path)


def test_study_layout(tmp_path):
    cfg = study_raw(tmp_path, [{"kind": "rs"}, {"kind": "hb"}, {"kind": "de"}])
    assert run_study(cfg, tmp_path / "out") == 0
    cells = sorted((tmp_path / "out" / "cells").glob("*.jsonl"))
    assert len(cells) == 2 * 1 * 3 * 5
    header = json.loads(cells[0].read_text().splitlines()[0])
    assert header["schema_version"] == 1 and header["kind"] == "header"
    with open(tmp_path / "out" / "sign_tests.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert all(r["optimizer_a"] != r["optimizer_b"] for r in rows)
    with open(tmp_path / "out" / "mean_rank.csv") as fh:
        ranks = list(csv.DictReader(fh))
    assert len(ranks) == 512
    for r in ranks:
        assert sum(float(r[o]) for o in ("rs", "hb", "de")) == pytest.approx(6.0)
    with open(tmp_path / "out" / "final_losses.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 30


def test_study_is_deterministic(tmp_path):
    cfg = study_raw(tmp_path, [{"kind": "rs"}, {"kind": "bohb"}], reps=2)
    run_study(cfg, tmp_path / "a")
    run_study(cfg, tmp_path / "b")
    for name in ("final_losses.csv", "sign_tests.csv", "mean_rank.csv", "ecdf.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_failed_cells_are_recorded(tmp_path):
    cfg = study_raw(tmp_path, [{"kind": "rs"}, {"kind": "sha"}], reps=1)
    cfg.tasks[1].source = {"kind": "csv", "path": "missing.csv", "label_column": "y"}
    failures = run_study(cfg, tmp_path / "out")
    assert failures == 2
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert len(manifest["failures"]) == 2
    assert len(list((tmp_path / "out" / "cells").glob("*.jsonl"))) == 2


def test_fedex_study_writes_policy_series(tmp_path):
    fx = {"kind": "sha_fedex", "params": {"wrapper_spec": {"schedule": [[3, 1], [1, 3]]}}}
    cfg = study_raw(tmp_path, [fx, {"kind": "sha", "params": {"schedule": [[3, 1], [1, 3]]}}], reps=1)
    assert run_study(cfg, tmp_path / "out") == 0
    lines = (tmp_path / "out" / "policy_trajectories.jsonl").read_text().splitlines()
    first = json.loads(lines[0])
    assert set(first["probs"]) == {"learning_rate", "batch_size"}


def test_report_requires_cells(tmp_path):
    with pytest.raises(FileNotFoundError):
        report(tmp_path)


def test_unknown_optimizer_rejected(tmp_path):
    cfg = study_raw(tmp_path, [{"kind": "smac"}], reps=1)
    with pytest.raises(ValueError, match="valid kinds"):
        run_study(cfg, tmp_path / "out")
