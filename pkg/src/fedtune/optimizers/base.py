"""Trial bookkeeping shared by every optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..backends import Benchmark, EvalResult
from ..space import FidelityVector
from ..sysmodel import BudgetExhausted, BudgetLedger


@dataclass
class Trial:
    config: dict
    fidelity: FidelityVector
    result: EvalResult
    sim_time: float
    index: int = 0

    @property
    def loss(self) -> float:
        return self.result.valid_loss

    def to_record(self) -> dict:
        return {
            "index": self.index,
            "config": self.config,
            "fidelity": {"round": self.fidelity.rounds, "sample_rate": self.fidelity.sample_rate},
            "metrics": self.result.metrics,
            "elapsed": self.result.elapsed,
            "sim_time": self.sim_time,
            "diverged": self.result.diverged,
            "truncated": self.result.truncated,
        }


@dataclass
class Run:
    """One optimizer run: a benchmark, its budget ledger and the trials so far."""

    bench: Benchmark
    ledger: BudgetLedger
    seed: int = 0
    sample_rate: float = 1.0
    trials: list[Trial] = field(default_factory=list)

    @property
    def space(self):
        return self.bench.search_space()

    @property
    def full_rounds(self) -> int:
        return self.bench.full_rounds()

    def rounds(self, r: float) -> int:
        """Snap a requested round count to what the benchmark can answer."""
        r = max(1, int(round(r)))
        allowed = self.bench.allowed_rounds()
        if allowed:
            return min(allowed, key=lambda a: (abs(a - r), a))
        return min(r, self.full_rounds)

    def evaluate(self, cfg: Mapping, rounds: int | None = None) -> Trial:
        """Evaluate and record; raises BudgetExhausted once nothing is affordable."""
        b = FidelityVector(self.full_rounds if rounds is None else rounds, self.sample_rate)
        res = self.bench.evaluate(cfg, b, seed=self.seed, ledger=self.ledger)
        t = Trial(dict(cfg), res.fidelity, res, self.ledger.spent, len(self.trials))
        self.trials.append(t)
        return t


def lhs(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Latin-hypercube sample of n points in [0, 1]^d."""
    out = np.empty((n, d))
    for j in range(d):
        out[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return out


__all__ = ["Trial", "Run", "BudgetExhausted", "lhs"]
