"""Classical HPO optimizers driving a benchmark under a simulated-time budget."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from ..backends import Benchmark
from ..sysmodel import BudgetLedger
from .base import Run, Trial
from .de import differential_evolution
from .hyperband import (KNOWN_SCHEDULES, bohb, dehb, hyperband, hyperband_brackets, sha, sha_schedule,
                        schedule_cost, successive_halving)
from .kde import KDEParams, KDEProposer, bo_kde
from .random_search import random_search

KINDS = ("rs", "de", "bo_kde", "sha", "hb", "bohb", "dehb")

_KDE_KEYS = {"n_samples", "random_fraction", "bandwidth_factor", "min_bandwidth", "gamma", "min_points"}
DEFAULTS: dict[str, dict[str, Any]] = {
    "rs": {},
    "de": {"pop_size": 20, "F": 0.5, "CR": 0.5},
    "bo_kde": {"n_samples": 64, "random_fraction": 1 / 3, "bandwidth_factor": 3.0,
               "min_bandwidth": 1e-3, "gamma": 0.15, "min_points": None},
    "sha": {"eta": 3, "n0": None, "stages": None, "total_rounds": None, "schedule": None},
    "hb": {"eta": 3, "min_rounds": 1, "max_brackets": None},
    "bohb": {"eta": 3, "min_rounds": 1, "max_brackets": None, "n_samples": 64, "random_fraction": 1 / 3,
             "bandwidth_factor": 3.0, "min_bandwidth": 1e-3, "gamma": 0.15, "min_points": None},
    "dehb": {"eta": 3, "min_rounds": 1, "max_brackets": None, "F": 0.5, "CR": 0.5},
}


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0
    sample_rate: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        unknown = set(self.params) - set(DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown {self.kind} parameters: {sorted(unknown)}")

    def knobs(self) -> dict[str, Any]:
        return {**DEFAULTS[self.kind], **self.params}


def sha_plan(run: Run, knobs: Mapping) -> list[tuple[int, int]]:
    """Explicit schedule, a one-shot plan from a round total, or the widest Hyperband bracket."""
    if knobs.get("schedule"):
        return [(int(n), int(r)) for n, r in knobs["schedule"]]
    eta = int(knobs["eta"])
    if knobs.get("total_rounds") is not None:
        return sha_schedule(int(knobs["n0"] or 27), eta, int(knobs["stages"] or 3), int(knobs["total_rounds"]))
    plan = hyperband_brackets(run.full_rounds, eta)[0]
    if knobs.get("stages"):
        plan = hyperband_brackets(run.full_rounds, eta)[-int(knobs["stages"])]
    return plan


def run_optimizer(spec: OptimizerSpec, bench: Benchmark, budget: float) -> list[Trial]:
    """Run one optimizer until the simulated-time budget rejects the next evaluation."""
    run = Run(bench, BudgetLedger(budget), seed=spec.seed, sample_rate=spec.sample_rate)
    rng = np.random.default_rng(spec.seed)
    k = spec.knobs()
    kde = KDEParams(**{key: k[key] for key in _KDE_KEYS if key in k}) if spec.kind in ("bo_kde", "bohb") else None
    if spec.kind == "rs":
        random_search(run, rng)
    elif spec.kind == "de":
        differential_evolution(run, rng, int(k["pop_size"]), float(k["F"]), float(k["CR"]))
    elif spec.kind == "bo_kde":
        bo_kde(run, rng, kde)
    elif spec.kind == "sha":
        sha(run, rng, sha_plan(run, k))
    elif spec.kind == "hb":
        hyperband(run, rng, int(k["eta"]), int(k["min_rounds"]), k["max_brackets"])
    elif spec.kind == "bohb":
        bohb(run, rng, int(k["eta"]), int(k["min_rounds"]), kde, k["max_brackets"])
    elif spec.kind == "dehb":
        dehb(run, rng, int(k["eta"]), int(k["min_rounds"]), float(k["F"]), float(k["CR"]), k["max_brackets"])
    return run.trials


__all__ = [
    "KINDS", "OptimizerSpec", "Run", "Trial", "run_optimizer", "sha_schedule", "schedule_cost",
    "hyperband_brackets", "successive_halving", "KNOWN_SCHEDULES", "KDEProposer", "KDEParams",
]
