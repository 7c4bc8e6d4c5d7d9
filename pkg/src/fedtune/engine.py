"""Federated learning course simulator for softmax regression and MLP models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Protocol, Sequence

import numpy as np

from .dataflow import Dataset, FederatedDataset
from .space import FidelityVector

DIVERGENCE_CAP = 1e6
SPLITS = ("train", "valid", "test")
METRIC_NAMES = tuple(f"{s}_{m}" for m in ("loss", "acc", "f1") for s in SPLITS)


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    n_features: int
    n_classes: int
    depth: int = 0  # hidden layers; 0 is plain softmax regression
    width: int = 0

    @cached_property
    def shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        sizes = [self.n_features] + [self.width] * self.depth + [self.n_classes]
        return [((a, b), (b,)) for a, b in zip(sizes[:-1], sizes[1:])]

    @cached_property
    def n_params(self) -> int:
        return sum(w[0] * w[1] + b[0] for w, b in self.shapes)


def architecture_for(family: str, cfg: Mapping, n_features: int, n_classes: int) -> Architecture:
    if family == "mlp":
        return Architecture(n_features, n_classes, int(cfg.get("depth", 1)), int(cfg.get("width", 16)))
    return Architecture(n_features, n_classes)


@dataclass
class ModelParams:
    """Parameters stored as one flat vector; ``layers`` gives (W, b) views."""

    arch: Architecture
    flat: np.ndarray

    def __post_init__(self):
        if self.flat.shape != (self.arch.n_params,):
            raise ShapeMismatch(f"expected {self.arch.n_params} parameters, got {self.flat.shape}")

    @cached_property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, pos = [], 0
        for (wi, wo), (bo,) in self.arch.shapes:
            w = self.flat[pos:pos + wi * wo].reshape(wi, wo)
            pos += wi * wo
            b = self.flat[pos:pos + bo]
            pos += bo
            out.append((w, b))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.flat.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))


def init_model(arch: Architecture, seed: int) -> ModelParams:
    rng = np.random.default_rng([seed, 7919])
    parts = []
    for (wi, wo), (bo,) in arch.shapes:
        bound = 1.0 / math.sqrt(wi)
        parts.append(rng.uniform(-bound, bound, size=wi * wo))
        parts.append(np.zeros(bo))
    return ModelParams(arch, np.concatenate(parts))


def _forward(model: ModelParams, x: np.ndarray, dropout: float = 0.0, rng=None):
    acts, masks = [x], []
    layers = model.layers
    h = x
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
        if dropout > 0.0 and rng is not None:
            m = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
            h = h * m
            masks.append(m)
        else:
            masks.append(None)
        acts.append(h)
    w, b = layers[-1]
    return h @ w + b, acts, masks


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(model: ModelParams, x: np.ndarray, y: np.ndarray, weight_decay: float = 0.0,
                  dropout: float = 0.0, rng=None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus (weight_decay / 2) * ||theta||^2 and its gradient."""
    logits, acts, masks = _forward(model, x, dropout, rng)
    logp = _log_softmax(logits)
    n = len(y)
    data_loss = -logp[np.arange(n), y].mean()
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = []
    layers = model.layers
    for li in range(len(layers) - 1, -1, -1):
        w, _ = layers[li]
        a = acts[li]
        grads.append(delta.sum(axis=0))
        grads.append((a.T @ delta).ravel())
        if li > 0:
            delta = (delta @ w.T) * (acts[li] > 0)
            if masks[li - 1] is not None:
                # acts already include the mask, so zeroed units are excluded above
                delta = delta * masks[li - 1]
    grad = np.concatenate(grads[::-1])
    loss = data_loss + 0.5 * weight_decay * float(model.flat @ model.flat)
    return float(loss), grad + weight_decay * model.flat


@dataclass(frozen=True)
class ClientHypers:
    batch_size: int = 32
    weight_decay: float = 0.0
    step_size: int = 1
    learning_rate: float = 0.01
    dropout: float = 0.0

    @classmethod
    def from_config(cls, cfg: Mapping) -> "ClientHypers":
        return cls(
            batch_size=int(cfg.get("batch_size", 32)),
            weight_decay=float(cfg.get("weight_decay", 0.0)),
            step_size=int(cfg.get("step_size", 1)),
            learning_rate=float(cfg.get("learning_rate", 0.01)),
            dropout=float(cfg.get("dropout", 0.0)),
        )


@dataclass(frozen=True)
class ServerHypers:
    learning_rate: float = 1.0
    momentum: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ValueError("server learning_rate must be > 0 and momentum in [0, 1)")

    @classmethod
    def from_config(cls, cfg: Mapping) -> "ServerHypers":
        return cls(float(cfg.get("server_learning_rate", 1.0)), float(cfg.get("server_momentum", 0.0)))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled cycling over range(n)."""
    bs = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            yield perm[start:start + bs]
        if n % bs:
            yield perm[n - n % bs:]


def local_update(model: ModelParams, shard: Dataset, h: ClientHypers, steps: int | None = None,
                 seed=0) -> tuple[ModelParams, bool]:
    """Run ``steps`` mini-batch SGD steps on a copy of ``model``.

    Returns the updated parameters and a diverged flag; on divergence the
    last finite parameters are returned.
    """
    steps = h.step_size if steps is None else steps
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if len(shard) == 0:
        raise ValueError("empty training shard")
    rng = np.random.default_rng(seed)
    cur = model.copy()
    if h.learning_rate == 0.0:
        return cur, False
    batches = _batches(len(shard), h.batch_size, rng)
    x, y = shard.features, shard.labels
    for _ in range(steps):
        idx = next(batches)
        loss, g = loss_and_grad(cur, x[idx], y[idx], h.weight_decay, h.dropout, rng)
        if not math.isfinite(loss) or loss > DIVERGENCE_CAP:
            return cur, True
        nxt = cur.flat - h.learning_rate * g
        if not np.all(np.isfinite(nxt)):
            return cur, True
        cur.flat[:] = nxt  # in place keeps the cached layer views valid
    return cur, False


def _weighted_mean(updates: Sequence[tuple[ModelParams, int]]) -> np.ndarray:
    if not updates:
        raise ValueError("no client updates to aggregate")
    arch = updates[0][0].arch
    for m, _ in updates:
        if m.arch != arch or m.flat.shape != updates[0][0].flat.shape:
            raise ShapeMismatch("client updates have inconsistent shapes")
    total = float(sum(n for _, n in updates))
    out = np.zeros_like(updates[0][0].flat)
    for m, n in updates:
        out += (n / total) * m.flat
    return out


def fedavg_aggregate(updates: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    return ModelParams(updates[0][0].arch, _weighted_mean(updates))


def fedopt_aggregate(buffer: np.ndarray | None, global_model: ModelParams,
                     updates: Sequence[tuple[ModelParams, int]], s: ServerHypers
                     ) -> tuple[ModelParams, np.ndarray]:
    """Server SGD with momentum on the pseudo-gradient (mean update minus global)."""
    avg = _weighted_mean(updates)
    if avg.shape != global_model.flat.shape:
        raise ShapeMismatch("client updates do not match the global model")
    delta = avg - global_model.flat
    buf = delta if buffer is None else s.momentum * buffer + delta
    # global + lr*buf, written relative to avg so lr=1, momentum=0 returns avg exactly
    new = avg + (s.learning_rate * buf - delta)
    return ModelParams(global_model.arch, new), buf


@dataclass
class RoundReport:
    round_index: int
    sampled_clients: list[int]
    global_metrics: dict[str, float]
    per_client_feedback: list[tuple[int, dict, float]] = field(default_factory=list)
    diverged: bool = False


@dataclass
class CourseResult:
    final: RoundReport
    reports: list[RoundReport]
    diverged: bool
    model: ModelParams
    trace: list[np.ndarray] | None = None

    def __iter__(self):
        return iter((self.final, self.reports, self.diverged))


class Explorer(Protocol):
    """Hook for assigning per-client configurations within a course (used by FedEx)."""

    def assign(self, round_index: int, clients: Sequence[int]) -> list[dict]: ...

    def observe(self, round_index: int, feedback: list[tuple[int, dict, float, int]]) -> None: ...


def n_sampled(sample_rate: float, n_clients: int) -> int:
    return max(1, min(n_clients, math.ceil(sample_rate * n_clients - 1e-9)))


class _Evaluator:
    """Pools every client's split so one forward pass yields all global metrics."""

    def __init__(self, task: FederatedDataset):
        self.k = task.n_classes
        self.pools = {}
        for s in SPLITS:
            parts = [getattr(c, s) for c in task.clients]
            x = np.concatenate([p.features for p in parts]) if parts else np.zeros((0, task.n_features))
            y = np.concatenate([p.labels for p in parts]).astype(np.int64)
            owner = np.concatenate([np.full(len(p), i) for i, p in enumerate(parts)]).astype(np.int64)
            sizes = np.array([len(p) for p in parts], dtype=np.float64)
            self.pools[s] = (x, y, owner, sizes)

    def __call__(self, model: ModelParams) -> dict[str, float]:
        out = {}
        k = self.k
        n_clients = None
        for s, (x, y, owner, sizes) in self.pools.items():
            if len(y) == 0:
                out[f"{s}_loss"] = out[f"{s}_acc"] = out[f"{s}_f1"] = float("nan")
                continue
            n_clients = len(sizes)
            logits, _, _ = _forward(model, x)
            logp = _log_softmax(logits)
            nll = -logp[np.arange(len(y)), y]
            pred = logits.argmax(axis=1)
            out[f"{s}_loss"] = float(nll.mean())
            out[f"{s}_acc"] = float((pred == y).mean())
            conf = np.bincount(owner * k * k + y * k + pred, minlength=n_clients * k * k)
            conf = conf.reshape(n_clients, k, k).astype(np.float64)
            tp = np.diagonal(conf, axis1=1, axis2=2)
            fp = conf.sum(axis=1) - tp
            fn = conf.sum(axis=2) - tp
            present = (tp + fp + fn) > 0
            with np.errstate(invalid="ignore", divide="ignore"):
                f1 = np.where(present, 2 * tp / (2 * tp + fp + fn), 0.0)
            per_client = f1.sum(axis=1) / np.maximum(present.sum(axis=1), 1)
            out[f"{s}_f1"] = float((per_client * sizes).sum() / sizes.sum())
        return out


def _client_loss(model: ModelParams, data: Dataset) -> float:
    if len(data) == 0:
        return float("nan")
    logits, _, _ = _forward(model, data.features)
    return float(-_log_softmax(logits)[np.arange(len(data)), data.labels].mean())


def _diverged_metrics(m: dict) -> bool:
    return any(not math.isfinite(m[f"{s}_loss"]) or m[f"{s}_loss"] > DIVERGENCE_CAP
               for s in ("train",))


def _capped(m: dict) -> dict:
    out = dict(m)
    for s in SPLITS:
        v = out[f"{s}_loss"]
        if not math.isfinite(v) or v > DIVERGENCE_CAP:
            out[f"{s}_loss"] = DIVERGENCE_CAP
    return out


def run_course(task: FederatedDataset, algo: str, config: Mapping, fidelity: FidelityVector,
               seed: int = 0, family: str = "lr", explorer: Explorer | None = None,
               record_trace: bool = False) -> CourseResult:
    """Simulate ``fidelity.rounds`` communication rounds of FedAvg or FedOPT.

    ``reports[0]`` describes the initial model and ``reports[t]`` the global
    model after round t, so a longer course extends a shorter one exactly.
    """
    if algo not in ("fedavg", "fedopt"):
        raise ValueError(f"unknown FL algorithm {algo!r}")
    arch = architecture_for(family, config, task.n_features, task.n_classes)
    base_hypers = ClientHypers.from_config(config)
    server = ServerHypers.from_config(config) if algo == "fedopt" else None
    model = init_model(arch, seed)
    evaluate = _Evaluator(task)
    n = n_sampled(fidelity.sample_rate, task.n_clients)

    reports = [RoundReport(0, [], evaluate(model))]
    trace = [model.flat.copy()] if record_trace else None
    buffer = None
    diverged = False
    base_cfg = dict(config)
    for t in range(1, fidelity.rounds + 1):
        if diverged:
            last = reports[-1]
            reports.append(RoundReport(t, [], last.global_metrics, [], True))
            continue
        rng = np.random.default_rng([seed, t, 1])
        clients = sorted(rng.choice(task.n_clients, size=n, replace=False).tolist())
        assigned = explorer.assign(t, clients) if explorer is not None else None
        updates, feedback, raw_feedback = [], [], []
        for j, cid in enumerate(clients):
            cfg = base_cfg if assigned is None else {**base_cfg, **assigned[j]}
            hyp = base_hypers if assigned is None else ClientHypers.from_config(cfg)
            shard = task.clients[cid]
            local, local_div = local_update(model, shard.train, hyp, seed=[seed, t, 2, cid])
            n_train = len(shard.train)
            updates.append((local, n_train))
            vloss = _client_loss(local, shard.valid)
            if local_div or not math.isfinite(vloss) or vloss > DIVERGENCE_CAP:
                vloss = DIVERGENCE_CAP
            feedback.append((cid, cfg, vloss))
            raw_feedback.append((cid, assigned[j] if assigned is not None else cfg, vloss, n_train))
        if algo == "fedavg":
            new_model = fedavg_aggregate(updates)
        else:
            new_model, new_buffer = fedopt_aggregate(buffer, model, updates, server)
        metrics = evaluate(new_model) if new_model.is_finite() else None
        if metrics is None or _diverged_metrics(metrics):
            diverged = True
            reports.append(RoundReport(t, clients, _capped(reports[-1].global_metrics), feedback, True))
            if explorer is not None:
                explorer.observe(t, raw_feedback)
            continue
        model = new_model
        if algo == "fedopt":
            buffer = new_buffer
        if record_trace:
            trace.append(model.flat.copy())
        reports.append(RoundReport(t, clients, metrics, feedback))
        if explorer is not None:
            explorer.observe(t, raw_feedback)
    return CourseResult(reports[-1], reports, diverged, model, trace)
