"""Black-box benchmark interface f(config, fidelity) in raw, tabular and surrogate modes."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataflow import FederatedDataset
from .engine import METRIC_NAMES, architecture_for, run_course
from .forest import RandomForest, Tree
from .space import CATEGORICAL, FidelityVector, SearchSpace, grid, nearest_grid
from .sysmodel import BudgetExhausted, BudgetLedger, SystemModelParams, payload_size, round_costs

log = logging.getLogger(__name__)

MODES = ("raw", "tabular", "surrogate")
TABLE_METRICS = ("train_loss", "valid_loss", "test_loss", "train_acc", "valid_acc", "test_acc",
                 "train_f1", "valid_f1", "test_f1")
SURROGATE_MAGIC = b"FHPOSRG1"
DEFAULT_SEEDS = 3
DEFAULT_JOB_CAP = 200_000


class GridMiss(KeyError):
    """Tabular query for a configuration or fidelity that is not in the table."""


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def quantize(v: float) -> float:
    """The value a table file stores for ``v``."""
    return float(fmt(v))


@dataclass
class EvalResult:
    metrics: dict[str, float]
    elapsed: float
    fidelity: FidelityVector
    diverged: bool = False
    truncated: bool = False

    @property
    def valid_loss(self) -> float:
        return self.metrics["valid_loss"]


# --------------------------------------------------------------------------- tables


@dataclass
class LookupTable:
    space: SearchSpace
    fidelities: list[FidelityVector]
    rows: dict[tuple, dict[str, float]] = field(default_factory=dict)
    n_seeds: int = DEFAULT_SEEDS

    def key(self, cfg: Mapping, b: FidelityVector) -> tuple:
        return self.space.key(cfg) + b.key()

    def lookup(self, cfg: Mapping, b: FidelityVector) -> dict[str, float]:
        try:
            return self.rows[self.key(cfg, b)]
        except KeyError:
            raise GridMiss(f"no table row for {dict(cfg)} at {b}; tabular mode only answers grid points") from None

    @property
    def rounds(self) -> list[int]:
        return sorted({b.rounds for b in self.fidelities})

    def __len__(self):
        return len(self.rows)

    def header(self) -> list[str]:
        return self.space.names + ["round", "sample_rate", *TABLE_METRICS, "n_seeds"]

    def ordered_keys(self) -> list[tuple]:
        return [self.key(c, b) for c in grid(self.space) for b in self.fidelities]

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with tmp.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for k in self.ordered_keys():
                if k in self.rows:
                    r = self.rows[k]
                    w.writerow([fmt(v) for v in k] + [fmt(r[m]) for m in TABLE_METRICS] + [self.n_seeds])
        os.replace(tmp, path)

    def as_arrays(self) -> tuple[list[dict], list[FidelityVector], dict[str, np.ndarray]]:
        cfgs, fids, cols = [], [], {m: [] for m in TABLE_METRICS}
        names = self.space.names
        for k in self.ordered_keys():
            if k not in self.rows:
                continue
            cfgs.append(dict(zip(names, k[:len(names)])))
            fids.append(FidelityVector(*k[len(names):]))
            for m in TABLE_METRICS:
                cols[m].append(self.rows[k][m])
        return cfgs, fids, {m: np.asarray(v) for m, v in cols.items()}


def _snap(dim, text: str):
    v = float(text)
    g = dim.nearest(v)
    if dim.kind != CATEGORICAL and not math.isclose(g, v, rel_tol=1e-6, abs_tol=1e-12):
        raise ValueError(f"table value {text} for {dim.name} is not a grid point")
    return g


def _parse_rows(path: Path, space: SearchSpace, tail: str):
    """Yield (key, metrics, tail value) from a table file, skipping a torn last line."""
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = space.names + ["round", "sample_rate", *TABLE_METRICS, tail]
        if header != expected:
            raise ValueError(f"{path}: unexpected header {header}")
        sr_values = list(space.sample_rates)
        d = len(space)
        for row in reader:
            if len(row) != len(expected):
                log.warning("%s: skipping malformed row %r", path, row)
                continue
            cfg = tuple(_snap(dim, row[i]) for i, dim in enumerate(space.dimensions))
            sr = float(row[d + 1])
            sr = min(sr_values, key=lambda s: abs(s - sr)) if sr_values else sr
            key = cfg + (int(row[d]), sr)
            metrics = {m: float(row[d + 2 + j]) for j, m in enumerate(TABLE_METRICS)}
            yield key, metrics, int(row[-1])


def space_path(table_path) -> Path:
    p = Path(table_path)
    return p.with_name(p.name + ".space.json")


def load_table(path, space: SearchSpace | None = None) -> LookupTable:
    """Read a table; without ``space`` the sidecar written by generate_table is used."""
    path = Path(path)
    if space is None:
        sp = space_path(path)
        if not sp.exists():
            raise FileNotFoundError(f"{sp} not found; pass the search space explicitly")
        space = SearchSpace.from_dict(json.loads(sp.read_text()))
    rows, fids, n_seeds = {}, [], set()
    for key, metrics, ns in _parse_rows(path, space, "n_seeds"):
        rows[key] = metrics
        b = FidelityVector(*key[len(space):])
        if b not in fids:
            fids.append(b)
        n_seeds.add(ns)
    if len(n_seeds) > 1:
        raise ValueError(f"{path}: n_seeds differs across rows")
    fids.sort(key=lambda b: (b.rounds, b.sample_rate))
    return LookupTable(space, fids, rows, n_seeds.pop() if n_seeds else DEFAULT_SEEDS)


def seed_log_path(table_path) -> Path:
    p = Path(table_path)
    return p.with_name(p.name + ".seeds.csv")


def load_seed_log(table_path, space: SearchSpace) -> dict[tuple, dict[str, float]]:
    """Per-seed rows keyed by (config..., round, sample_rate, seed)."""
    path = seed_log_path(table_path)
    out = {}
    if path.exists():
        for key, metrics, seed in _parse_rows(path, space, "seed"):
            out[key + (seed,)] = metrics
    return out


_WORKER: dict = {}


def _init_worker(task, algo, family):
    _WORKER.update(task=task, algo=algo, family=family)


def _course_unit(unit):
    cfg, sample_rate, rounds, seed = unit
    res = run_course(_WORKER["task"], _WORKER["algo"], cfg, FidelityVector(max(rounds), sample_rate),
                     seed=seed, family=_WORKER["family"])
    return [{m: res.reports[r].global_metrics[m] for m in TABLE_METRICS} for r in rounds]


def generate_table(task: FederatedDataset, algo: str, space: SearchSpace,
                   fidelities: Sequence[FidelityVector], n_seeds: int = DEFAULT_SEEDS, out=None,
                   family: str | None = None, jobs: int = 1, job_cap: int = DEFAULT_JOB_CAP,
                   progress: Callable[[int, int], None] | None = None) -> LookupTable:
    """Evaluate every grid configuration at every fidelity with seeds 0..n_seeds-1.

    Courses sharing a sample rate are run once to the largest requested round
    count; shorter fidelities are read off the same run, which is exact
    because a course's first t rounds do not depend on its length. Rows are
    checkpointed to ``out`` and existing rows are reused on the next call.
    """
    family = family or space.family
    fidelities = sorted(set(fidelities), key=lambda b: (b.rounds, b.sample_rate))
    configs = grid(space)
    n_runs = len(configs) * len(fidelities) * n_seeds
    if n_runs > job_cap:
        raise ValueError(f"table needs {n_runs} course evaluations, above the cap of {job_cap}")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    table = LookupTable(space, list(fidelities), n_seeds=n_seeds)
    path = Path(out) if out is not None else None
    seed_rows: dict[tuple, dict] = {}
    if path is not None and path.exists():
        try:
            old = load_table(path, space)
        except (ValueError, StopIteration) as exc:
            log.warning("ignoring unreadable table %s: %s", path, exc)
        else:
            if old.n_seeds == n_seeds:
                table.rows.update({k: v for k, v in old.rows.items() if k in set(table.ordered_keys())})
                seed_rows = load_seed_log(path, space)
    by_rate: dict[float, list[int]] = {}
    for b in fidelities:
        by_rate.setdefault(b.sample_rate, []).append(b.rounds)

    todo = [c for c in configs
            if any(table.key(c, b) not in table.rows for b in fidelities)]
    total = len(configs) * len(fidelities)
    done = len(table.rows)
    if progress:
        progress(done, total)
    if not todo:
        return table

    units = [(c, sr, rounds, s) for c in todo for sr, rounds in by_rate.items() for s in range(n_seeds)]
    if jobs > 1:
        pool = ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(task, algo, family))
        results = pool.map(_course_unit, units, chunksize=max(1, len(units) // (jobs * 16)))
    else:
        pool = None
        _init_worker(task, algo, family)
        results = map(_course_unit, units)

    fh = seed_fh = None
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not path.exists() or not table.rows
        fh = path.open("w" if fresh else "a", newline="")
        sp = seed_log_path(path)
        seed_fresh = fresh or not sp.exists()
        seed_fh = sp.open("w" if seed_fresh else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        seed_writer = csv.writer(seed_fh, lineterminator="\n")
        if fresh:
            writer.writerow(table.header())
        if seed_fresh:
            seed_writer.writerow(space.names + ["round", "sample_rate", *TABLE_METRICS, "seed"])
    try:
        per_cfg = len(by_rate) * n_seeds
        it = iter(results)
        for c in todo:
            acc: dict[tuple, list[dict]] = {}
            for sr, rounds in by_rate.items():
                for s in range(n_seeds):
                    for r, m in zip(rounds, next(it)):
                        key = table.key(c, FidelityVector(r, sr))
                        acc.setdefault(key, []).append(m)
                        q = {k: quantize(v) for k, v in m.items()}
                        seed_rows[key + (s,)] = q
                        if fh is not None:
                            seed_writer.writerow([fmt(v) for v in key] + [fmt(q[k]) for k in TABLE_METRICS] + [s])
            for key, ms in acc.items():
                mean = {k: quantize(sum(m[k] for m in ms) / len(ms)) for k in TABLE_METRICS}
                table.rows[key] = mean
                if fh is not None:
                    writer.writerow([fmt(v) for v in key] + [fmt(mean[k]) for k in TABLE_METRICS] + [n_seeds])
            if fh is not None:
                fh.flush()
                seed_fh.flush()
            done = len(table.rows)
            if progress:
                progress(done, total)
        assert per_cfg * len(todo) == len(units)
    finally:
        if fh is not None:
            fh.close()
            seed_fh.close()
        if pool is not None:
            pool.shutdown()
    if path is not None:
        table.save(path)
        space_path(path).write_text(json.dumps(space.to_dict(), sort_keys=True) + "\n")
        _rewrite_seed_log(path, space, table, seed_rows)
    return table


def _rewrite_seed_log(path: Path, space: SearchSpace, table: LookupTable, seed_rows: dict) -> None:
    sp = seed_log_path(path)
    tmp = sp.with_name(sp.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(space.names + ["round", "sample_rate", *TABLE_METRICS, "seed"])
        for k in table.ordered_keys():
            for s in range(table.n_seeds):
                r = seed_rows.get(k + (s,))
                if r is not None:
                    w.writerow([fmt(v) for v in k] + [fmt(r[m]) for m in TABLE_METRICS] + [s])
    os.replace(tmp, sp)


# ------------------------------------------------------------------------ surrogate


def feature_columns(space: SearchSpace) -> list[dict]:
    """Encoding map: one column per ranged dim (log10 for log dims), one-hot for categoricals."""
    cols = []
    for d in space.dimensions:
        if d.kind == CATEGORICAL:
            cols += [{"dim": d.name, "onehot": v} for v in d.values]
        else:
            cols.append({"dim": d.name, "log": bool(d.log)})
    return cols + [{"dim": "round", "log": False}, {"dim": "sample_rate", "log": False}]


def encode(columns: Sequence[dict], cfgs: Sequence[Mapping], fids: Sequence[FidelityVector]) -> np.ndarray:
    X = np.empty((len(cfgs), len(columns)))
    for i, (c, b) in enumerate(zip(cfgs, fids)):
        full = {**c, "round": b.rounds, "sample_rate": b.sample_rate}
        for j, col in enumerate(columns):
            v = full[col["dim"]]
            if "onehot" in col:
                X[i, j] = 1.0 if v == col["onehot"] else 0.0
            elif col["log"]:
                X[i, j] = math.log10(v)
            else:
                X[i, j] = float(v)
    return X


@dataclass
class Surrogate:
    """Independent random forests per table metric over a shared feature encoding."""

    space: SearchSpace
    columns: list[dict]
    forests: dict[str, RandomForest]
    n_trees: int
    max_depth: int
    cv_mae: float = float("nan")

    def predict(self, cfg: Mapping, b: FidelityVector) -> dict[str, float]:
        X = encode(self.columns, [cfg], [b])
        return {m: float(f.predict(X)[0]) for m, f in self.forests.items()}

    def predict_many(self, cfgs, fids, metric: str = "valid_loss") -> np.ndarray:
        return self.forests[metric].predict(encode(self.columns, cfgs, fids))

    def save(self, path) -> None:
        header = {
            "version": 1,
            "space": self.space.to_dict(),
            "columns": self.columns,
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "cv_mae": self.cv_mae,
            "forests": {},
            "order": list(self.forests),
        }
        blobs = io.BytesIO()
        for m, f in self.forests.items():
            header["forests"][m] = {"seed": f.seed, "min_leaf": f.min_leaf,
                                    "nodes": [t.n_nodes for t in f.trees]}
            for t in f.trees:
                for arr, dt in ((t.feature, "<i8"), (t.threshold, "<f8"), (t.left, "<i8"),
                                (t.right, "<i8"), (t.value, "<f8")):
                    blobs.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
        hb = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(SURROGATE_MAGIC)
            fh.write(struct.pack("<Q", len(hb)))
            fh.write(hb)
            fh.write(blobs.getvalue())

    @classmethod
    def load(cls, path) -> "Surrogate":
        raw = Path(path).read_bytes()
        if raw[:8] != SURROGATE_MAGIC:
            raise ValueError(f"{path} is not a surrogate file")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16:16 + hlen])
        pos = 16 + hlen
        forests = {}
        for m in header["order"]:
            meta = header["forests"][m]
            trees = []
            for n in meta["nodes"]:
                arrs = []
                for dt in ("<i8", "<f8", "<i8", "<i8", "<f8"):
                    arrs.append(np.frombuffer(raw, dtype=dt, count=n, offset=pos).astype(dt[1:]))
                    pos += 8 * n
                tree = Tree(*arrs)
                inner = np.flatnonzero(tree.feature >= 0)
                if inner.size and (np.any(tree.left[inner] <= inner) or np.any(tree.right[inner] <= inner)
                                   or max(tree.left[inner].max(), tree.right[inner].max()) >= n):
                    raise ValueError(f"{path}: corrupt tree structure")
                trees.append(tree)
            forests[m] = RandomForest(header["n_trees"], header["max_depth"], meta["min_leaf"],
                                      meta["seed"], trees)
        return cls(SearchSpace.from_dict(header["space"]), header["columns"], forests,
                   header["n_trees"], header["max_depth"], header["cv_mae"])


def cross_val_mae(X: np.ndarray, y: np.ndarray, n_trees: int, max_depth: int, folds: int = 10,
                  seed: int = 0) -> float:
    n = len(y)
    fold_of = np.random.default_rng([seed, 404]).permutation(n) % folds
    err = np.empty(n)
    for k in range(folds):
        test = fold_of == k
        if not test.any():
            continue
        f = RandomForest(n_trees, max_depth, 1, seed).fit(X[~test], y[~test])
        err[test] = np.abs(f.predict(X[test]) - y[test])
    return float(err.mean())


def fit_surrogate(table: LookupTable, n_trees_options=(10, 20), max_depth_options=(10, 15, 20),
                  folds: int = 10, seed: int = 0, target: str = "valid_loss") -> tuple[Surrogate, float]:
    """Pick (n_trees, max_depth) by k-fold CV MAE on ``target``, then refit every metric."""
    if len(table) < 20:
        raise ValueError(f"need at least 20 table rows to fit a surrogate, got {len(table)}")
    cfgs, fids, cols = table.as_arrays()
    columns = feature_columns(table.space)
    X = encode(columns, cfgs, fids)
    best = None
    for nt in n_trees_options:
        for md in max_depth_options:
            mae = cross_val_mae(X, cols[target], nt, md, folds, seed)
            log.info("surrogate cv: n_trees=%d max_depth=%d mae=%.6g", nt, md, mae)
            if best is None or mae < best[0]:
                best = (mae, nt, md)
    mae, nt, md = best
    forests = {m: RandomForest(nt, md, 1, seed).fit(X, cols[m]) for m in TABLE_METRICS}
    return Surrogate(table.space, columns, forests, nt, md, mae), mae


# ------------------------------------------------------------------------ benchmark


@dataclass(frozen=True)
class Benchmark:
    """A handle on one (task, FL algorithm) problem in a given evaluation mode."""

    task: FederatedDataset
    algorithm: str
    space: SearchSpace
    mode: str = "raw"
    system: SystemModelParams = SystemModelParams()
    family: str = "lr"
    table: LookupTable | None = None
    surrogate: Surrogate | None = None
    task_id: str = "task"
    max_rounds: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "tabular" and self.table is None:
            raise ValueError("tabular mode needs a lookup table")
        if self.mode == "surrogate" and self.surrogate is None:
            raise ValueError("surrogate mode needs a fitted surrogate")

    def search_space(self) -> SearchSpace:
        """The space optimizers should propose from (grid-restricted in tabular mode)."""
        return self.space.as_grid() if self.mode == "tabular" else self.space

    def allowed_rounds(self) -> list[int] | None:
        return self.table.rounds if self.mode == "tabular" else None

    def full_rounds(self) -> int:
        if self.mode == "tabular":
            return max(self.table.rounds)
        return self.max_rounds or self.space.round_range[1]

    def fidelity(self, rounds: int | None = None, sample_rate: float = 1.0) -> FidelityVector:
        return FidelityVector(self.full_rounds() if rounds is None else rounds, sample_rate)

    def system_for(self, cfg: Mapping) -> SystemModelParams:
        arch = architecture_for(self.family, cfg, self.task.n_features, self.task.n_classes)
        return self.system.with_payload(payload_size(arch))

    def _cost_seed(self, cfg: Mapping, b: FidelityVector, seed: int):
        tag = zlib.crc32(repr((self.space.key(cfg), b.key())).encode())
        return [int(seed), tag]

    def course_seconds(self, cfg: Mapping, b: FidelityVector, seed: int = 0) -> np.ndarray:
        return round_costs(self.system_for(cfg), self.task.n_clients, b, self._cost_seed(cfg, b, seed))

    def check(self, cfg: Mapping, b: FidelityVector) -> None:
        self.space.validate(cfg)
        self.space.validate_fidelity(b)
        if self.mode == "tabular":
            if nearest_grid(self.space, cfg) != dict(cfg) or b not in self.table.fidelities:
                raise GridMiss(f"{dict(cfg)} at {b} is off the table grid")

    def evaluate(self, cfg: Mapping, b: FidelityVector, seed: int = 0,
                 ledger: BudgetLedger | None = None, explorer=None) -> EvalResult:
        """Answer f(cfg, b); charges ``ledger`` and truncates rounds it cannot afford.

        ``explorer`` (raw mode only) lets FedEx assign per-client configurations.
        """
        if explorer is not None and self.mode != "raw":
            raise ValueError("per-client exploration needs raw mode")
        cfg = {n: cfg[n] for n in self.space.names}
        self.check(cfg, b)
        costs = self.course_seconds(cfg, b, seed)
        truncated = False
        if ledger is not None:
            if ledger.spent >= ledger.limit:
                raise BudgetExhausted("budget exhausted")
            afford = ledger.affordable_rounds(costs)
            if afford < b.rounds:
                allowed = self.allowed_rounds()
                if allowed is not None:
                    fits = [r for r in allowed if r <= afford]
                    afford = max(fits) if fits else 0
                if afford < 1:
                    raise BudgetExhausted(f"remaining {ledger.remaining:.6g}s buys no round")
                b = FidelityVector(afford, b.sample_rate)
                costs = costs[:afford]
                truncated = True
        diverged = False
        if self.mode == "raw":
            res = run_course(self.task, self.algorithm, cfg, b, seed=seed, family=self.family,
                             explorer=explorer)
            metrics = dict(res.final.global_metrics)
            diverged = res.diverged
        elif self.mode == "tabular":
            metrics = dict(self.table.lookup(cfg, b))
        else:
            metrics = self.surrogate.predict(cfg, b)
        elapsed = float(costs.sum())
        if ledger is not None:
            ledger.charge(elapsed)
        return EvalResult(metrics, elapsed, b, diverged, truncated)


def open_benchmark(task: FederatedDataset, algorithm: str, space: SearchSpace, mode: str,
                   system: SystemModelParams | None = None, table_path=None, surrogate_path=None,
                   task_id: str = "task", max_rounds: int | None = None) -> Benchmark:
    table = load_table(table_path, space) if mode == "tabular" else None
    sur = Surrogate.load(surrogate_path) if mode == "surrogate" else None
    if mode == "surrogate" and max_rounds is None and table_path is not None and Path(table_path).exists():
        max_rounds = max(load_table(table_path, space).rounds)
    return Benchmark(task, algorithm, space, mode, system or SystemModelParams(), space.family,
                     table, sur, task_id, max_rounds)
