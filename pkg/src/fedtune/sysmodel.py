"""Round-time system model and the simulated wall-clock budget ledger."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Mapping

import numpy as np

from .engine import Architecture, n_sampled
from .space import FidelityVector

BYTES_PER_PARAM = 4
MB = 2 ** 20


class BudgetExhausted(RuntimeError):
    """Raised when the ledger cannot afford even one more round."""


@dataclass(frozen=True)
class SystemModelParams:
    """Inputs of the round-time model. Sizes left as None are derived from the model."""

    b_up_server_mbps: float = 0.25
    b_down_client_mbps: float = 0.75
    b_up_client_mbps: float = 0.25
    s_down_mb: float | None = None
    s_up_mb: float | None = None
    c_seconds: float = 1.0
    t_server_seconds: float = 0.01
    sampled_stragglers: bool = False

    def __post_init__(self):
        for name in ("b_up_server_mbps", "b_down_client_mbps", "b_up_client_mbps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("s_down_mb", "s_up_mb"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ValueError(f"{name} must be non-negative")
        if self.c_seconds < 0 or self.t_server_seconds < 0:
            raise ValueError("compute times must be non-negative")

    def with_payload(self, payload_mb: float) -> "SystemModelParams":
        """Fill unset message sizes with ``payload_mb`` (full-model upload and download)."""
        return replace(
            self,
            s_down_mb=payload_mb if self.s_down_mb is None else self.s_down_mb,
            s_up_mb=payload_mb if self.s_up_mb is None else self.s_up_mb,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SystemModelParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown system-model keys: {sorted(unknown)}")
        return cls(**d)


BAD_NETWORK = SystemModelParams()
GOOD_NETWORK = SystemModelParams(b_up_server_mbps=256.0, b_down_client_mbps=768.0, b_up_client_mbps=256.0)


def expected_straggler_time(n: int, c: float) -> float:
    """Expected maximum of n i.i.d. exponential client times with mean c: c * H_n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return c * sum(1.0 / i for i in range(1, n + 1))


def payload_size(arch: Architecture) -> float:
    """Model size in MB at 4 bytes per parameter."""
    return arch.n_params * BYTES_PER_PARAM / MB


def _sizes(p: SystemModelParams) -> tuple[float, float]:
    if p.s_down_mb is None or p.s_up_mb is None:
        raise ValueError("message sizes unset; call with_payload() first")
    return p.s_down_mb, p.s_up_mb


def comm_time(p: SystemModelParams, n: int) -> float:
    s_down, s_up = _sizes(p)
    broadcast = max(n * s_down / p.b_up_server_mbps, s_down / p.b_down_client_mbps)
    return broadcast + s_up / p.b_up_client_mbps


def round_time(p: SystemModelParams, n_sampled: int, rng: np.random.Generator | None = None) -> float:
    """Seconds for one round with ``n_sampled`` participating clients.

    With ``rng`` and ``p.sampled_stragglers`` the straggler time is drawn
    instead of taking its expectation.
    """
    if n_sampled < 1:
        raise ValueError("n_sampled must be >= 1")
    if p.sampled_stragglers and rng is not None and p.c_seconds > 0:
        straggler = float(rng.exponential(p.c_seconds, size=n_sampled).max())
    else:
        straggler = expected_straggler_time(n_sampled, p.c_seconds)
    return comm_time(p, n_sampled) + straggler + p.t_server_seconds


def round_costs(p: SystemModelParams, n_clients: int, b: FidelityVector, seed=None) -> np.ndarray:
    """Per-round costs of a course; constant unless stragglers are sampled."""
    n = n_sampled(b.sample_rate, n_clients)
    if p.sampled_stragglers and seed is not None:
        rng = np.random.default_rng(seed)
        return np.array([round_time(p, n, rng) for _ in range(b.rounds)])
    return np.full(b.rounds, round_time(p, n))


def course_time(p: SystemModelParams, n_clients: int, b: FidelityVector, seed=None) -> float:
    if b.rounds == 0:
        return 0.0
    if p.sampled_stragglers and seed is not None:
        return float(round_costs(p, n_clients, b, seed).sum())
    return b.rounds * round_time(p, n_sampled(b.sample_rate, n_clients))


@dataclass
class BudgetLedger:
    limit: float
    spent: float = 0.0

    def __post_init__(self):
        if not self.limit > 0:
            raise ValueError("budget must be positive")

    @property
    def remaining(self) -> float:
        return max(self.limit - self.spent, 0.0)

    def affordable_rounds(self, costs: np.ndarray) -> int:
        """How many leading rounds of ``costs`` fit into the remaining budget."""
        cum = np.cumsum(costs)
        return int(np.searchsorted(cum, self.remaining * (1 + 1e-12), side="right"))

    def charge(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("cannot charge negative time")
        if self.spent >= self.limit:
            raise BudgetExhausted(f"budget of {self.limit:.6g}s exhausted")
        self.spent += seconds
