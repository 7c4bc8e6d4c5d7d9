import csv
import json

import pytest
import yaml

from fedtune.cli import main

BASE = {
    "tasks": [{"id": "blobs", "family": "lr",
               "source": {"kind": "synth", "n_samples": 150, "n_features": 4, "n_classes": 2, "seed": 1}}],
    "algorithms": ["fedavg"],
    "mode": "tabular",
    "tables_dir": "tables",
    "fidelity": {"rounds": [1, 3, 9, 27], "n_seeds": 1},
    "spaces": {"lr": {"dimensions": [
        {"name": "learning_rate", "kind": "continuous", "lo": 0.01, "hi": 1.0, "log": True, "bins": 3},
        {"name": "batch_size", "kind": "integer", "lo": 16, "hi": 32, "log": True, "bins": 2},
    ]}},
    "optimizers": [{"kind": "rs"}, {"kind": "hb"}],
    "budget_full_courses": 4,
    "repetitions": 2,
    "seed": 0,
}


def write_config(dirpath, **over):
    cfg = {**BASE, **over}
    path = dirpath / "study.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_config(d)
    assert main(["gen-table", "--config", str(cfg)]) == 0
    return d, cfg


def test_gen_table_rows(workdir, capsys):
    d, _ = workdir
    lines = (d / "tables" / "blobs__fedavg.csv").read_text().splitlines()
    assert len(lines) == 1 + 6 * 4


def test_gen_table_resume_is_immediate(workdir, capsys, monkeypatch):
    d, cfg = workdir
    from fedtune import backends
    monkeypatch.setattr(backends, "run_course", lambda *a, **k: pytest.fail("recomputed"))
    before = (d / "tables" / "blobs__fedavg.csv").read_bytes()
    assert main(["gen-table", "--config", str(cfg), "--resume"]) == 0
    assert (d / "tables" / "blobs__fedavg.csv").read_bytes() == before
    assert "24/24 rows done" in capsys.readouterr().err


def test_gen_table_missing_key(tmp_path, capsys):
    raw = {k: v for k, v in BASE.items() if k != "tasks"}
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(raw))
    assert main(["gen-table", "--config", str(path)]) != 0
    assert "tasks" in capsys.readouterr().err
    assert main(["gen-table", "--config", str(tmp_path / "nope.yaml")]) != 0


def test_fit_surrogate_prints_choice(workdir, capsys):
    d, _ = workdir
    out = d / "s.srg"
    assert main(["fit-surrogate", "--table", str(d / "tables" / "blobs__fedavg.csv"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "n_trees=" in text and "max_depth=" in text and "cv_mae=" in text
    assert out.exists()


def test_run_writes_deterministic_log(workdir, capsys):
    d, cfg = workdir
    for name in ("a.jsonl", "b.jsonl"):
        assert main(["run", "--config", str(cfg), "--optimizer", "rs", "--seed", "3", "--out", str(d / name)]) == 0
    a = (d / "a.jsonl").read_text()
    assert a and a == (d / "b.jsonl").read_text()
    rec = json.loads(a.splitlines()[0])
    assert {"config", "fidelity", "metrics", "sim_time"} <= set(rec)


def test_run_unknown_optimizer(workdir, capsys):
    d, cfg = workdir
    assert main(["run", "--config", str(cfg), "--optimizer", "tpe", "--out", str(d / "x.jsonl")]) != 0
    err = capsys.readouterr().err
    assert "valid kinds" in err and "bohb" in err


def test_study_and_report(workdir, capsys):
    d, cfg = workdir
    out = d / "study"
    assert main(["study", "--config", str(cfg), "--out", str(out)]) == 0
    with open(out / "sign_tests.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 1
    (out / "sign_tests.csv").unlink()
    assert main(["report", "--study-dir", str(out)]) == 0
    assert (out / "sign_tests.csv").exists()


def test_report_on_empty_dir(tmp_path, capsys):
    assert main(["report", "--study-dir", str(tmp_path)]) != 0


def test_fedex_study_has_policy_series(tmp_path, capsys):
    cfg = write_config(tmp_path, mode="raw", repetitions=1, fidelity={"rounds": [1, 3]},
                       optimizers=[{"kind": "rs_fedex", "params": {"wrapper_spec": {"n_trials": 2, "rounds": 3}}},
                                   {"kind": "rs"}])
    assert main(["study", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "policy_trajectories.jsonl").read_text().strip()


def test_help_per_subcommand(capsys):
    for cmd in ("gen-table", "fit-surrogate", "run", "study", "report"):
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0
        assert "usage" in capsys.readouterr().out
