"""Hyperparameter search spaces, configurations and fidelity vectors."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

CONTINUOUS = "continuous"
INTEGER = "integer"
CATEGORICAL = "categorical"
KINDS = (CONTINUOUS, INTEGER, CATEGORICAL)

ROUND_RANGE = (1, 500)
SAMPLE_RATE_RANGE = (0.2, 1.0)
SAMPLE_RATE_BINS = 5

# A configuration is a plain mapping from dimension name to value.
HyperConfig = dict


def _clean(v: float) -> float:
    # strips float noise from log/linear spacing, e.g. 9.999999999999999e-06 -> 1e-05
    return float(f"{v:.12g}")


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str
    lo: float | None = None
    hi: float | None = None
    values: tuple = ()
    log: bool = False
    bins: int | None = None
    side: str = "client"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dimension kind {self.kind!r}")
        if self.side not in ("client", "server"):
            raise ValueError(f"unknown side {self.side!r} for {self.name}")
        if self.kind == CATEGORICAL:
            if not self.values:
                raise ValueError(f"categorical dimension {self.name} needs values")
            object.__setattr__(self, "values", tuple(self.values))
            if self.bins is None:
                object.__setattr__(self, "bins", len(self.values))
            elif self.bins != len(self.values):
                raise ValueError(f"{self.name}: bins must equal the number of values")
            return
        if self.lo is None or self.hi is None or not self.lo < self.hi:
            raise ValueError(f"{self.name}: need lo < hi")
        if self.log and self.lo <= 0:
            raise ValueError(f"{self.name}: log scale requires lo > 0")
        if self.bins is not None and self.bins < 2:
            raise ValueError(f"{self.name}: grid_bins must be >= 2")

    @property
    def is_ranged(self) -> bool:
        return self.kind != CATEGORICAL

    def grid(self) -> list:
        """Discretized values of this dimension, ascending for ranged kinds."""
        if self.kind == CATEGORICAL:
            return list(self.values)
        if self.bins is None:
            raise ValueError(f"{self.name} has no grid_bins")
        if self.log:
            pts = np.logspace(math.log10(self.lo), math.log10(self.hi), self.bins)
        else:
            pts = np.linspace(self.lo, self.hi, self.bins)
        if self.kind == INTEGER:
            out: list = []
            for v in pts:
                iv = _round_half_up(float(v))
                if iv not in out:
                    out.append(iv)
            return out
        return [_clean(float(v)) for v in pts]

    def contains(self, v) -> bool:
        if self.kind == CATEGORICAL:
            return v in self.values
        if self.kind == INTEGER and int(v) != v:
            return False
        return self.lo - 1e-12 <= v <= self.hi + 1e-12

    def nearest(self, v):
        """Closest grid value; log-domain distance for log dims, ties to the smaller value."""
        grid = self.grid()
        if self.kind == CATEGORICAL:
            if v in grid:
                return v
            # numeric categorical lists snap by absolute distance
            return min(grid, key=lambda g: (abs(g - v), g))
        if self.log:
            lv = math.log10(v)
            dist = [abs(math.log10(g) - lv) for g in grid]
        else:
            dist = [abs(g - v) for g in grid]
        best = min(range(len(grid)), key=lambda i: (round(dist[i], 12), grid[i]))
        return grid[best]

    # unit-cube encoding used by the optimizers

    def from_unit(self, u: float):
        u = min(max(float(u), 0.0), 1.0)
        if self.kind == CATEGORICAL:
            k = len(self.values)
            return self.values[min(int(u * k), k - 1)]
        if self.log:
            lo, hi = math.log(self.lo), math.log(self.hi)
            v = math.exp(lo + u * (hi - lo))
        else:
            v = self.lo + u * (self.hi - self.lo)
        if self.kind == INTEGER:
            return int(min(max(_round_half_up(v), self.lo), self.hi))
        return min(max(v, self.lo), self.hi)

    def to_unit(self, v) -> float:
        if self.kind == CATEGORICAL:
            return (self.values.index(v) + 0.5) / len(self.values)
        if self.log:
            lo, hi = math.log(self.lo), math.log(self.hi)
            return (math.log(v) - lo) / (hi - lo)
        return (v - self.lo) / (self.hi - self.lo)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"name": self.name, "kind": self.kind, "side": self.side,
                             "log": self.log, "bins": self.bins}
        if self.kind == CATEGORICAL:
            d["values"] = list(self.values)
        else:
            d["lo"], d["hi"] = self.lo, self.hi
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Dimension":
        return cls(
            name=d["name"],
            kind=d["kind"],
            lo=d.get("lo"),
            hi=d.get("hi"),
            values=tuple(d.get("values") or ()),
            log=bool(d.get("log", False)),
            bins=d.get("bins"),
            side=d.get("side", "client"),
        )


@dataclass(frozen=True)
class FidelityVector:
    rounds: int
    sample_rate: float = 1.0

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if not 0.0 < self.sample_rate <= 1.0:
            raise ValueError("sample_rate must lie in (0, 1]")

    def key(self) -> tuple:
        return (int(self.rounds), float(self.sample_rate))


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple[Dimension, ...]
    family: str = "custom"
    algorithm: str = "fedavg"
    round_range: tuple[int, int] = ROUND_RANGE
    sample_rates: tuple[float, ...] = field(
        default_factory=lambda: tuple(np.round(np.linspace(*SAMPLE_RATE_RANGE, SAMPLE_RATE_BINS), 12).tolist())
    )

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(self.dimensions))
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate dimension names in {names}")
        if self.algorithm == "fedavg" and any(d.side == "server" for d in self.dimensions):
            raise ValueError("server-side dimensions only exist for fedopt")

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    def __getitem__(self, name: str) -> Dimension:
        for d in self.dimensions:
            if d.name == name:
                return d
        raise KeyError(name)

    def __len__(self):
        return len(self.dimensions)

    def side(self, which: str) -> list[Dimension]:
        return [d for d in self.dimensions if d.side == which]

    def validate(self, cfg: Mapping) -> None:
        missing = [n for n in self.names if n not in cfg]
        if missing:
            raise ValueError(f"configuration lacks {missing}")
        for d in self.dimensions:
            if not d.contains(cfg[d.name]):
                raise ValueError(f"{d.name}={cfg[d.name]!r} outside its range")

    def validate_fidelity(self, b: FidelityVector) -> None:
        lo, hi = self.round_range
        if not (b.rounds == 0 or lo <= b.rounds <= hi):
            raise ValueError(f"rounds={b.rounds} outside {self.round_range}")
        if not min(self.sample_rates) - 1e-12 <= b.sample_rate <= max(self.sample_rates) + 1e-12:
            raise ValueError(f"sample_rate={b.sample_rate} outside the fidelity range")

    def key(self, cfg: Mapping) -> tuple:
        return tuple(cfg[n] for n in self.names)

    def from_unit(self, u: Sequence[float]) -> HyperConfig:
        return {d.name: d.from_unit(x) for d, x in zip(self.dimensions, u)}

    def to_unit(self, cfg: Mapping) -> np.ndarray:
        return np.array([d.to_unit(cfg[d.name]) for d in self.dimensions])

    def sample(self, rng: np.random.Generator) -> HyperConfig:
        """Uniform draw (log-uniform for log dims)."""
        return self.from_unit(rng.random(len(self.dimensions)))

    def as_grid(self) -> "SearchSpace":
        """Same space with every dimension restricted to its grid, as categorical values."""
        dims = tuple(
            Dimension(name=d.name, kind=CATEGORICAL, values=tuple(d.grid()), side=d.side)
            for d in self.dimensions
        )
        return SearchSpace(dims, self.family, self.algorithm, self.round_range, self.sample_rates)

    def subspace(self, names: Iterable[str]) -> "SearchSpace":
        keep = set(names)
        return SearchSpace(tuple(d for d in self.dimensions if d.name in keep),
                           self.family, self.algorithm, self.round_range, self.sample_rates)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "algorithm": self.algorithm,
            "round_range": list(self.round_range),
            "sample_rates": list(self.sample_rates),
            "dimensions": [d.to_dict() for d in self.dimensions],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SearchSpace":
        kw = {}
        if "round_range" in d:
            kw["round_range"] = tuple(d["round_range"])
        if "sample_rates" in d:
            kw["sample_rates"] = tuple(float(x) for x in d["sample_rates"])
        return cls(
            tuple(Dimension.from_dict(x) for x in d["dimensions"]),
            family=d.get("family", "custom"),
            algorithm=d.get("algorithm", "fedavg"),
            **kw,
        )


def builtin_space(family: str, algorithm: str) -> SearchSpace:
    """The LR / MLP benchmark spaces, optionally with FedOPT server dimensions."""
    if family not in ("lr", "mlp"):
        raise ValueError(f"unknown model family {family!r}; expected 'lr' or 'mlp'")
    if algorithm not in ("fedavg", "fedopt"):
        raise ValueError(f"unknown FL algorithm {algorithm!r}; expected 'fedavg' or 'fedopt'")
    dims = [
        Dimension("batch_size", INTEGER, 4, 256, log=True, bins=7),
        Dimension("weight_decay", CONTINUOUS, 0.0, 0.001, bins=4),
        Dimension("step_size", INTEGER, 1, 4, bins=4),
        Dimension("learning_rate", CONTINUOUS, 1e-5, 1.0, log=True, bins=6),
    ]
    if family == "mlp":
        dims += [
            Dimension("depth", INTEGER, 1, 3, bins=3),
            Dimension("width", INTEGER, 16, 1024, log=True, bins=7),
        ]
    if algorithm == "fedopt":
        dims += [
            Dimension("server_momentum", CONTINUOUS, 0.0, 0.9, bins=2, side="server"),
            Dimension("server_learning_rate", CONTINUOUS, 0.1, 1.0, bins=3, side="server"),
        ]
    return SearchSpace(tuple(dims), family=family, algorithm=algorithm)


def grid(space: SearchSpace) -> list[HyperConfig]:
    """Cartesian product of the per-dimension grids, lexicographic in dimension order."""
    axes = [d.grid() for d in space.dimensions]
    return [dict(zip(space.names, combo)) for combo in itertools.product(*axes)]


def nearest_grid(space: SearchSpace, cfg: Mapping) -> HyperConfig:
    return {d.name: d.nearest(cfg[d.name]) for d in space.dimensions}


def fidelity_grid(rounds: Sequence[int], sample_rates: Sequence[float]) -> list[FidelityVector]:
    return [FidelityVector(int(r), float(s)) for r in rounds for s in sample_rates]
