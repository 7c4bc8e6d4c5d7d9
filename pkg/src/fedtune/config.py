"""Study configuration files (YAML or JSON) and the objects built from them."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .backends import Benchmark, load_table, Surrogate
from .dataflow import DEFAULT_ALPHA, DEFAULT_CLIENTS, FederatedDataset, federate, load_csv, synth_blobs
from .space import FidelityVector, SearchSpace, builtin_space, fidelity_grid
from .sysmodel import SystemModelParams, course_time


class ConfigError(ValueError):
    pass


def _require(d: Mapping, key: str, where: str = "config"):
    if key not in d or d[key] is None:
        raise ConfigError(f"missing key '{key}' in {where}")
    return d[key]


@dataclass
class TaskSpec:
    id: str
    family: str
    source: dict
    n_clients: int = DEFAULT_CLIENTS
    alpha: float = DEFAULT_ALPHA
    split_seed: int = 0

    def build(self, base_dir: Path) -> FederatedDataset:
        kind = _require(self.source, "kind", f"task {self.id} source")
        if kind == "synth":
            s = self.source
            data = synth_blobs(int(_require(s, "n_samples", f"task {self.id} source")),
                               int(_require(s, "n_features", f"task {self.id} source")),
                               int(_require(s, "n_classes", f"task {self.id} source")),
                               float(s.get("spread", 1.0)), int(s.get("seed", 0)))
        elif kind == "csv":
            path = Path(_require(self.source, "path", f"task {self.id} source"))
            if not path.is_absolute():
                path = base_dir / path
            data = load_csv(path, _require(self.source, "label_column", f"task {self.id} source"))
        else:
            raise ConfigError(f"task {self.id}: unknown source kind {kind!r}")
        return federate(data, self.n_clients, self.alpha, self.split_seed, name=self.id)


@dataclass
class StudyConfig:
    tasks: list[TaskSpec]
    algorithms: list[str]
    optimizers: list[dict]
    mode: str = "raw"
    budget_seconds: float | None = None
    budget_full_courses: float | None = None
    repetitions: int = 1
    seed: int = 0
    fidelity_rounds: list[int] = field(default_factory=lambda: [1, 3, 9, 27])
    sample_rates: list[float] = field(default_factory=lambda: [1.0])
    n_seeds: int = 3
    system: SystemModelParams = field(default_factory=SystemModelParams)
    tables_dir: Path | None = None
    spaces: dict = field(default_factory=dict)
    output: Path | None = None
    jobs: int = 1
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def space_for(self, family: str, algorithm: str) -> SearchSpace:
        custom = self.spaces.get(family)
        if custom is not None:
            d = {"family": family, "algorithm": algorithm, **custom}
            d.setdefault("sample_rates", self.sample_rates)
            sp = SearchSpace.from_dict(d)
        else:
            sp = builtin_space(family, algorithm)
        return sp

    def fidelities(self) -> list[FidelityVector]:
        return fidelity_grid(self.fidelity_rounds, self.sample_rates)

    def table_path(self, task_id: str, algorithm: str) -> Path:
        if self.tables_dir is None:
            raise ConfigError("missing key 'tables_dir' in config")
        return self.tables_dir / f"{task_id}__{algorithm}.csv"

    def surrogate_path(self, task_id: str, algorithm: str) -> Path:
        return self.table_path(task_id, algorithm).with_suffix(".srg")

    def benchmark(self, task: TaskSpec, data: FederatedDataset, algorithm: str,
                  mode: str | None = None) -> Benchmark:
        mode = mode or self.mode
        space = self.space_for(task.family, algorithm)
        table = sur = None
        if mode == "tabular":
            path = self.table_path(task.id, algorithm)
            if not path.exists():
                raise ConfigError(f"lookup table {path} not found; run gen-table first")
            table = load_table(path, space)
        elif mode == "surrogate":
            path = self.surrogate_path(task.id, algorithm)
            if not path.exists():
                raise ConfigError(f"surrogate {path} not found; run fit-surrogate first")
            sur = Surrogate.load(path)
        return Benchmark(data, algorithm, space, mode, self.system, task.family, table, sur,
                         task.id, max(self.fidelity_rounds))

    def budget_for(self, bench: Benchmark) -> float:
        """Budget in simulated seconds; ``budget_full_courses`` counts full-fidelity courses."""
        if self.budget_seconds is not None:
            return float(self.budget_seconds)
        cfg = bench.space.from_unit(np.full(len(bench.space), 0.5))
        one = course_time(bench.system_for(cfg), bench.task.n_clients,
                          FidelityVector(bench.full_rounds(), 1.0))
        return float(self.budget_full_courses) * one


def parse_config(raw: Mapping, base_dir: Path = Path(".")) -> StudyConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a mapping")
    tasks = []
    for i, t in enumerate(_require(raw, "tasks")):
        where = f"tasks[{i}]"
        tasks.append(TaskSpec(
            id=str(_require(t, "id", where)),
            family=str(t.get("family", "lr")),
            source=dict(_require(t, "source", where)),
            n_clients=int(t.get("n_clients", DEFAULT_CLIENTS)),
            alpha=float(t.get("alpha", DEFAULT_ALPHA)),
            split_seed=int(t.get("split_seed", 0)),
        ))
    fid = raw.get("fidelity", {}) or {}
    budget = raw.get("budget_seconds")
    budget_fc = raw.get("budget_full_courses")
    cfg = StudyConfig(
        tasks=tasks,
        algorithms=list(raw.get("algorithms", ["fedavg"])),
        optimizers=[dict(o) for o in raw.get("optimizers", [])],
        mode=str(raw.get("mode", "raw")),
        budget_seconds=float(budget) if budget is not None else None,
        budget_full_courses=float(budget_fc) if budget_fc is not None else None,
        repetitions=int(raw.get("repetitions", 1)),
        seed=int(raw.get("seed", 0)),
        fidelity_rounds=[int(r) for r in fid.get("rounds", [1, 3, 9, 27])],
        sample_rates=[float(s) for s in fid.get("sample_rates", [1.0])],
        n_seeds=int(fid.get("n_seeds", 3)),
        system=SystemModelParams.from_dict(raw.get("system", {}) or {}),
        tables_dir=(base_dir / raw["tables_dir"]) if raw.get("tables_dir") else None,
        spaces=dict(raw.get("spaces", {}) or {}),
        output=(base_dir / raw["output"]) if raw.get("output") else None,
        jobs=int(raw.get("jobs", 1)),
        base_dir=base_dir,
        raw=dict(raw),
    )
    if cfg.repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    if cfg.mode not in ("raw", "tabular", "surrogate"):
        raise ConfigError(f"unknown mode {cfg.mode!r}")
    for a in cfg.algorithms:
        if a not in ("fedavg", "fedopt"):
            raise ConfigError(f"unknown algorithm {a!r}")
    return cfg


def load_config(path) -> StudyConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    with path.open() as fh:
        raw = yaml.safe_load(fh)
    return parse_config(raw or {}, path.parent)


def require_budget(cfg: StudyConfig) -> None:
    if cfg.budget_seconds is None and cfg.budget_full_courses is None:
        raise ConfigError("missing key 'budget_seconds' in config")
    if cfg.budget_seconds is not None and cfg.budget_seconds <= 0:
        raise ConfigError("budget_seconds must be > 0")


def dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True)
