"""Best-seen trajectories, mean ranks, sign tests, ECDFs, and study orchestration."""

from __future__ import annotations

import csv
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import StudyConfig, require_budget
from .fedex import run_fedex
from .optimizers import KINDS, OptimizerSpec, Trial, run_optimizer

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TIME_POINTS = 512
FEDEX_KINDS = ("rs_fedex", "sha_fedex")


# ----------------------------------------------------------------- statistics


def incumbent_trace(trials: Sequence) -> list[tuple[float, float]]:
    """(sim_time, incumbent loss) after each trial.

    A trial replaces the incumbent only if it was run with at least as many
    rounds and reached a lower validation loss, so higher-fidelity results
    are never displaced by cheaper ones.
    """
    out = []
    best_loss, best_rounds = math.inf, -1
    for t in trials:
        loss, rounds = _loss(t), _rounds(t)
        if rounds >= best_rounds and loss < best_loss:
            best_loss, best_rounds = loss, rounds
        elif best_rounds < 0:
            best_loss, best_rounds = loss, rounds
        out.append((_time(t), best_loss))
    return out


def _loss(t) -> float:
    return t.loss if isinstance(t, Trial) else float(t["metrics"]["valid_loss"])


def _rounds(t) -> int:
    return t.fidelity.rounds if isinstance(t, Trial) else int(t["fidelity"]["round"])


def _time(t) -> float:
    return t.sim_time if isinstance(t, Trial) else float(t["sim_time"])


def best_seen(trials: Sequence, t_grid: Sequence[float]) -> list[float]:
    """Incumbent validation loss at each grid time; +inf before the first completion."""
    trace = incumbent_trace(trials)
    times = np.array([t for t, _ in trace])
    vals = [v for _, v in trace]
    out = []
    for t in t_grid:
        k = int(np.searchsorted(times, t, side="right"))
        out.append(vals[k - 1] if k else math.inf)
    return out


def _average_ranks(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def mean_rank(curves: Mapping[str, Sequence[Sequence[float]]]) -> dict[str, np.ndarray]:
    """Average rank over problems at every time point (1 is best, ties share the mean rank).

    ``curves[opt]`` is [n_problems][n_times]; problems must align across optimizers.
    """
    names = list(curves)
    if len(names) < 2:
        raise ValueError("mean rank needs at least two optimizers")
    arrs = [np.asarray(curves[n], dtype=np.float64) for n in names]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError("curves are not on a shared grid")
    stacked = np.stack(arrs)  # [opt, problem, time]
    ranks = np.zeros_like(stacked)
    for p in range(shape[0]):
        for t in range(shape[1]):
            ranks[:, p, t] = _average_ranks(stacked[:, p, t])
    return {n: ranks[i].mean(axis=0) for i, n in enumerate(names)}


def sign_test(wins: int, ties: int, losses: int) -> float:
    """One-sided exact binomial sign test, P(X >= wins | n = wins + losses, p = 1/2); ties dropped."""
    n = wins + losses
    if n < 1:
        raise ValueError("sign test needs at least one non-tied comparison")
    tail = sum(math.comb(n, k) for k in range(wins, n + 1))
    return float(Fraction(tail, 2 ** n))


def ecdf(values: Sequence[float]) -> list[tuple[float, float]]:
    """Step points (normalized regret, cumulative fraction) of the empirical CDF."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        raise ValueError("ECDF of normalized regret needs at least two distinct values")
    r = np.sort((v - lo) / (hi - lo))
    pts, n = [], len(r)
    for i, x in enumerate(r):
        if i + 1 < n and r[i + 1] == x:
            continue
        pts.append((float(x), (i + 1) / n))
    return pts


def compare(a: Sequence[float], b: Sequence[float]) -> tuple[int, int, int]:
    """(wins, ties, losses) of a over b, lower is better."""
    w = sum(x < y for x, y in zip(a, b))
    t = sum(x == y for x, y in zip(a, b))
    return w, t, len(a) - w - t


def time_grid(first: float, last: float, n: int = TIME_POINTS) -> np.ndarray:
    first = max(first, 1e-9)
    last = max(last, first * (1 + 1e-9))
    return np.geomspace(first, last, n)


# ---------------------------------------------------------------------- study


def _label(o: Mapping) -> str:
    return str(o.get("name") or o["kind"])


def cell_name(task: str, algo: str, label: str, rep: int) -> str:
    return f"{task}__{algo}__{label}__rep{rep}"


def _run_cell(args):
    cfg, task_idx, algo, opt, rep = args
    task = cfg.tasks[task_idx]
    data = task.build(cfg.base_dir)
    kind = opt["kind"]
    params = dict(opt.get("params", {}) or {})
    seed = cfg.seed + rep
    sample_rate = float(opt.get("sample_rate", 1.0))
    policy = None
    if kind in FEDEX_KINDS:
        bench = cfg.benchmark(task, data, algo, "raw")
        budget = cfg.budget_for(bench)
        res = run_fedex(bench, kind.split("_")[0], params.get("wrapper_spec"), budget, seed,
                        float(params.get("step", 0.1)), sample_rate, bool(params.get("use_fedex", True)))
        trials = res.trials
        policy = {"snapshots": {str(k): v for k, v in res.snapshots.items()}, "incumbent": res.incumbent}
    else:
        bench = cfg.benchmark(task, data, algo)
        budget = cfg.budget_for(bench)
        spec = OptimizerSpec(kind, params, seed, sample_rate)
        trials = run_optimizer(spec, bench, budget)
    return [t.to_record() for t in trials], budget, policy


def _cells(cfg: StudyConfig):
    for ti, task in enumerate(cfg.tasks):
        for algo in cfg.algorithms:
            for opt in cfg.optimizers:
                for rep in range(cfg.repetitions):
                    yield ti, task.id, algo, opt, rep


def validate_optimizers(cfg: StudyConfig) -> None:
    labels = [_label(o) for o in cfg.optimizers]
    if len(set(labels)) != len(labels):
        raise ValueError(f"optimizer labels must be unique: {labels}")
    for o in cfg.optimizers:
        if o.get("kind") not in KINDS + FEDEX_KINDS:
            raise ValueError(f"unknown optimizer {o.get('kind')!r}; valid kinds: {', '.join(KINDS + FEDEX_KINDS)}")


def run_study(cfg: StudyConfig, out, jobs: int | None = None) -> int:
    """Run every (task, algorithm, optimizer, repetition) cell and write the reports.

    Returns the number of failed cells.
    """
    require_budget(cfg)
    validate_optimizers(cfg)
    out = Path(out)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    cells = list(_cells(cfg))
    args = [(cfg, ti, algo, opt, rep) for ti, _, algo, opt, rep in cells]
    jobs = jobs or cfg.jobs or 1
    failures = {}

    def results():
        if jobs > 1:
            with ProcessPoolExecutor(jobs) as pool:
                futs = [pool.submit(_run_cell, a) for a in args]
                for f in futs:
                    try:
                        yield f.result(), None
                    except Exception:  # a failing cell is recorded, not fatal
                        yield None, traceback.format_exc()
        else:
            for a in args:
                try:
                    yield _run_cell(a), None
                except Exception:
                    yield None, traceback.format_exc()

    for (ti, task_id, algo, opt, rep), (res, err) in zip(cells, results()):
        name = cell_name(task_id, algo, _label(opt), rep)
        if err is not None:
            log.error("cell %s failed:\n%s", name, err)
            failures[name] = err.strip().splitlines()[-1]
            continue
        records, budget, policy = res
        header = {"schema_version": SCHEMA_VERSION, "kind": "header", "task": task_id, "algorithm": algo,
                  "optimizer": _label(opt), "optimizer_kind": opt["kind"], "repetition": rep,
                  "seed": cfg.seed + rep, "mode": "raw" if opt["kind"] in FEDEX_KINDS else cfg.mode,
                  "budget_seconds": budget, "system": cfg.system.to_dict(), "config_hash": cfg.config_hash()}
        with (cells_dir / f"{name}.jsonl").open("w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for r in records:
                fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "kind": "trial", **r}, sort_keys=True) + "\n")
        if policy is not None:
            with (cells_dir / f"{name}.policy.json").open("w") as fh:
                json.dump({"schema_version": SCHEMA_VERSION, **policy}, fh, sort_keys=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        "optimizers": [_label(o) for o in cfg.optimizers],
        "tasks": [t.id for t in cfg.tasks],
        "algorithms": cfg.algorithms,
        "repetitions": cfg.repetitions,
        "failures": failures,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    report(out)
    return len(failures)


def read_cell(path: Path) -> tuple[dict, list[dict]]:
    header, trials = None, []
    with path.open() as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("kind") == "header":
                header = rec
            else:
                trials.append(rec)
    if header is None:
        raise ValueError(f"{path} has no header record")
    return header, trials


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def report(study_dir) -> dict:
    """Recompute every summary CSV from the cell files on disk."""
    study_dir = Path(study_dir)
    files = sorted((study_dir / "cells").glob("*.jsonl")) if (study_dir / "cells").is_dir() else []
    if not files:
        raise FileNotFoundError(f"no cell files under {study_dir}")
    cells = [read_cell(f) for f in files]
    manifest_path = study_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    opt_order = manifest.get("optimizers") or sorted({h["optimizer"] for h, _ in cells})

    firsts = [_time(tr[0]) for _, tr in cells if tr]
    grid_t = time_grid(min(firsts) if firsts else 1.0, max(h["budget_seconds"] for h, _ in cells))

    finals, curves = {}, {}
    for h, trials in cells:
        key = (h["task"], h["algorithm"], h["optimizer"], h["repetition"])
        curve = best_seen(trials, grid_t)
        curves[key] = curve
        finals[key] = curve[-1]

    problems = sorted({(k[0], k[1], k[3]) for k in finals})
    rows = []
    for task, algo, rep in problems:
        for o in opt_order:
            k = (task, algo, o, rep)
            if k in finals:
                n_trials = len(next(tr for h, tr in cells if (h["task"], h["algorithm"], h["optimizer"], h["repetition"]) == k))
                rows.append([SCHEMA_VERSION, task, algo, o, rep, finals[k], n_trials])
    _write_csv(study_dir / "final_losses.csv",
               ["schema_version", "task", "algorithm", "optimizer", "repetition", "final_best_seen", "n_trials"], rows)

    # sign tests compare per-benchmark means over repetitions
    benches = sorted({(k[0], k[1]) for k in finals})
    means = {}
    for o in opt_order:
        for b in benches:
            vals = [finals[(b[0], b[1], o, r)] for (t, a, r) in problems if (t, a) == b and (b[0], b[1], o, r) in finals]
            if vals:
                means[(o, b)] = float(np.mean(vals))
    sign_rows = []
    for i, a in enumerate(opt_order):
        for b in opt_order[i + 1:]:
            common = [bb for bb in benches if (a, bb) in means and (b, bb) in means]
            w, t, l = compare([means[(a, x)] for x in common], [means[(b, x)] for x in common])
            p = sign_test(w, t, l) if w + l else 1.0
            sign_rows.append([SCHEMA_VERSION, a, b, w, t, l, p])
    _write_csv(study_dir / "sign_tests.csv",
               ["schema_version", "optimizer_a", "optimizer_b", "wins", "ties", "losses", "p_value"], sign_rows)

    complete = [p for p in problems if all((p[0], p[1], o, p[2]) in curves for o in opt_order)]
    if len(opt_order) >= 2 and complete:
        ranks = mean_rank({o: [curves[(p[0], p[1], o, p[2])] for p in complete] for o in opt_order})
        rank_rows = [[SCHEMA_VERSION, float(grid_t[j])] + [float(ranks[o][j]) for o in opt_order]
                     for j in range(len(grid_t))]
    else:
        rank_rows = []
    _write_csv(study_dir / "mean_rank.csv", ["schema_version", "time"] + list(opt_order), rank_rows)

    ecdf_rows = []
    for task, algo in benches:
        losses = [_loss(t) for h, tr in cells if (h["task"], h["algorithm"]) == (task, algo) for t in tr]
        top = max((_rounds(t) for h, tr in cells if (h["task"], h["algorithm"]) == (task, algo) for t in tr),
                  default=0)
        full = [_loss(t) for h, tr in cells if (h["task"], h["algorithm"]) == (task, algo)
                for t in tr if _rounds(t) == top]
        vals = full if len(set(full)) >= 2 else losses
        if len(set(vals)) >= 2:
            ecdf_rows += [[SCHEMA_VERSION, task, algo, r, f] for r, f in ecdf(vals)]
    _write_csv(study_dir / "ecdf.csv", ["schema_version", "task", "algorithm", "normalized_regret", "fraction"],
               ecdf_rows)

    policy_files = sorted((study_dir / "cells").glob("*.policy.json"))
    if policy_files:
        with (study_dir / "policy_trajectories.jsonl").open("w") as fh:
            for pf in policy_files:
                data = json.loads(pf.read_text())
                cell = pf.name[: -len(".policy.json")]
                for trial, snaps in sorted(data["snapshots"].items(), key=lambda kv: int(kv[0])):
                    for rnd, probs in enumerate(snaps):
                        fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "cell": cell, "trial": int(trial),
                                             "round": rnd, "probs": probs}, sort_keys=True) + "\n")
    return {"finals": finals, "time_grid": grid_t, "curves": curves}
