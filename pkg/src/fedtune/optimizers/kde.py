"""Kernel-density model of good vs. bad configurations (TPE-style), as used by BOHB."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..space import CATEGORICAL, SearchSpace
from .base import BudgetExhausted, Run


@dataclass
class KDEParams:
    n_samples: int = 64
    random_fraction: float = 1 / 3
    bandwidth_factor: float = 3.0
    min_bandwidth: float = 1e-3
    gamma: float = 0.15
    min_points: int | None = None


class KDEProposer:
    """Proposes configurations maximizing l(x) / g(x) over sampled candidates.

    Observations are (config, loss) pairs; continuous and integer dimensions
    are modelled by Gaussian kernels in the unit-cube encoding, categorical
    ones by add-one smoothed frequencies.
    """

    def __init__(self, space: SearchSpace, rng: np.random.Generator, params: KDEParams | None = None):
        self.space = space
        self.rng = rng
        self.p = params or KDEParams()
        self.cat = [d.kind == CATEGORICAL for d in space.dimensions]
        self.n_values = [len(d.values) if c else 0 for d, c in zip(space.dimensions, self.cat)]
        self.min_points = self.p.min_points or len(space) + 1

    def encode(self, cfg) -> np.ndarray:
        return np.array([d.values.index(cfg[d.name]) if c else d.to_unit(cfg[d.name])
                         for d, c in zip(self.space.dimensions, self.cat)], dtype=np.float64)

    def decode(self, x: np.ndarray) -> dict:
        return {d.name: d.values[int(v)] if c else d.from_unit(v)
                for d, c, v in zip(self.space.dimensions, self.cat, x)}

    def random(self) -> dict:
        return self.space.sample(self.rng)

    def _bandwidths(self, data: np.ndarray) -> np.ndarray:
        n, d = data.shape
        sd = data.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
        bw = 1.06 * sd * n ** (-1.0 / (d + 4)) * self.p.bandwidth_factor
        return np.maximum(bw, self.p.min_bandwidth)

    def _log_density(self, x: np.ndarray, data: np.ndarray, bw: np.ndarray) -> np.ndarray:
        """Log product-kernel density of candidates ``x`` [m, d] under ``data`` [n, d]."""
        m, d = x.shape
        n = len(data)
        logk = np.zeros((m, n))
        for j in range(d):
            if self.cat[j]:
                k = self.n_values[j]
                counts = np.bincount(data[:, j].astype(np.int64), minlength=k)
                probs = (counts + 1.0) / (n + k)
                logk += np.log(probs[x[:, j].astype(np.int64)])[:, None]
            else:
                z = (x[:, j][:, None] - data[:, j][None, :]) / bw[j]
                logk += -0.5 * z * z - math.log(bw[j] * math.sqrt(2 * math.pi))
        mx = logk.max(axis=1, keepdims=True)
        return (mx + np.log(np.exp(logk - mx).mean(axis=1, keepdims=True)))[:, 0]

    def _sample_from(self, data: np.ndarray, bw: np.ndarray) -> np.ndarray:
        n, d = data.shape
        out = np.empty((self.p.n_samples, d))
        for i in range(self.p.n_samples):
            base = data[self.rng.integers(n)]
            for j in range(d):
                if self.cat[j]:
                    k = self.n_values[j]
                    counts = np.bincount(data[:, j].astype(np.int64), minlength=k)
                    out[i, j] = self.rng.choice(k, p=(counts + 1.0) / (n + k))
                else:
                    v = base[j] + bw[j] * self.rng.standard_normal()
                    for _ in range(20):
                        if 0.0 <= v <= 1.0:
                            break
                        v = base[j] + bw[j] * self.rng.standard_normal()
                    out[i, j] = min(max(v, 0.0), 1.0)
        return out

    def propose(self, observations: list[tuple[dict, float]]) -> dict:
        if self.rng.random() < self.p.random_fraction:
            return self.random()
        n = len(observations)
        if n < max(self.min_points, 3):
            return self.random()
        losses = np.array([l for _, l in observations], dtype=np.float64)
        if np.all(losses == losses[0]):
            # no ranking information: good and bad sets are arbitrary
            return self.random()
        order = np.argsort(losses, kind="stable")
        n_good = max(1, math.ceil(self.p.gamma * n))
        if n - n_good < 1:
            return self.random()
        X = np.array([self.encode(c) for c, _ in observations])
        good, bad = X[order[:n_good]], X[order[n_good:]]
        bw_good, bw_bad = self._bandwidths(good), self._bandwidths(bad)
        cands = self._sample_from(good, bw_good)
        score = self._log_density(cands, good, bw_good) - self._log_density(cands, bad, bw_bad)
        return self.decode(cands[int(np.argmax(score))])


def bo_kde(run: Run, rng: np.random.Generator, params: KDEParams | None = None) -> None:
    """Model-based search at full fidelity."""
    prop = KDEProposer(run.space, rng, params)
    obs: list[tuple[dict, float]] = []
    try:
        while True:
            t = run.evaluate(prop.propose(obs))
            obs.append((t.config, t.loss))
    except BudgetExhausted:
        return
