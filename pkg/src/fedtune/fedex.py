"""FedEx: concurrent exploration of client-side configurations within one FL course.

A server-side policy (independent categoricals, one per client-side
hyperparameter) assigns every sampled client its own configuration; the
clients' post-update validation losses drive an exponentiated-gradient
update of the policy. The policy is wrapped by random search or successive
halving, which pick server-side and architectural hyperparameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .backends import Benchmark
from .engine import DIVERGENCE_CAP, run_course
from .optimizers.base import BudgetExhausted, Run, Trial
from .optimizers.hyperband import top_k
from .space import FidelityVector, SearchSpace
from .sysmodel import BudgetLedger

ARCHITECTURE_DIMS = ("depth", "width")
BASELINE_DECAY = 0.1
DEFAULT_STEP = 1.0


@dataclass
class Policy:
    names: list[str]
    arms: list[list]
    probs: list[np.ndarray]
    step: float = DEFAULT_STEP

    @classmethod
    def uniform(cls, space: SearchSpace, step: float = DEFAULT_STEP) -> "Policy":
        """Uniform policy over the grids of the explorable client-side dimensions."""
        dims = [d for d in space.side("client") if d.name not in ARCHITECTURE_DIMS]
        arms = [list(d.grid()) for d in dims]
        return cls([d.name for d in dims], arms, [np.full(len(a), 1.0 / len(a)) for a in arms], step)

    def copy(self) -> "Policy":
        return Policy(list(self.names), [list(a) for a in self.arms], [p.copy() for p in self.probs], self.step)

    def argmax(self) -> dict:
        return {n: a[int(np.argmax(p))] for n, a, p in zip(self.names, self.arms, self.probs)}

    def snapshot(self) -> dict[str, list[float]]:
        return {n: p.tolist() for n, p in zip(self.names, self.probs)}


@dataclass(frozen=True)
class ClientFeedback:
    client_id: int
    config: Mapping
    loss: float
    n_samples: int


def sample_config(policy: Policy, rng: np.random.Generator) -> dict:
    return {n: a[int(rng.choice(len(a), p=p))] for n, a, p in zip(policy.names, policy.arms, policy.probs)}


def aggr_policy(policy: Policy, feedback: Sequence[ClientFeedback],
                baseline: float | None) -> tuple[Policy, float]:
    """One exponentiated-gradient step on the expected client loss.

    Gradient per arm is the importance-weighted, baseline-relative loss of the
    clients that drew it, scaled by its largest magnitude so that one round
    moves any logit by at most ``policy.step``. A missing baseline starts at
    this round's mean loss.
    """
    if not feedback:
        raise ValueError("aggr_policy needs at least one feedback entry")
    n = np.array([f.n_samples for f in feedback], dtype=np.float64)
    w = n / n.sum()
    losses = np.array([f.loss for f in feedback], dtype=np.float64)
    ok = losses < DIVERGENCE_CAP
    round_mean = float((w[ok] * losses[ok]).sum() / w[ok].sum()) if ok.any() else None
    if baseline is None:
        baseline = round_mean if round_mean is not None else 0.0
    diff = losses - baseline
    # rounding residue would otherwise be blown up by the normalization below
    diff[np.abs(diff) <= 1e-9 * np.maximum(1.0, np.maximum(np.abs(losses), abs(baseline)))] = 0.0
    adv = w * diff
    new = policy.copy()
    for d, (name, arms) in enumerate(zip(policy.names, policy.arms)):
        p = policy.probs[d]
        grad = np.zeros(len(arms))
        mass = np.zeros(len(arms))
        for f, a in zip(feedback, adv):
            j = arms.index(f.config[name])
            grad[j] += a / p[j]
            mass[j] += abs(a) / p[j]
        grad[np.abs(grad) <= 1e-9 * mass] = 0.0
        scale = np.abs(grad).max()
        if scale > 0:
            grad /= scale
        logits = np.log(np.maximum(p, 1e-300)) - policy.step * grad
        logits -= logits.max()
        q = np.exp(logits)
        new.probs[d] = q / q.sum()
    if round_mean is not None:
        baseline = (1 - BASELINE_DECAY) * baseline + BASELINE_DECAY * round_mean
    return new, baseline


class FedExExplorer:
    """Course hook: samples per-client configs each round and updates the policy."""

    def __init__(self, policy: Policy, seed):
        self.policy = policy
        self.baseline: float | None = None
        self.rng = np.random.default_rng(seed)
        self.snapshots: list[dict] = [policy.snapshot()]

    def assign(self, round_index: int, clients: Sequence[int]) -> list[dict]:
        return [sample_config(self.policy, self.rng) for _ in clients]

    def observe(self, round_index: int, feedback) -> None:
        fb = [ClientFeedback(cid, {n: cfg[n] for n in self.policy.names}, loss, n)
              for cid, cfg, loss, n in feedback]
        self.policy, self.baseline = aggr_policy(self.policy, fb, self.baseline)
        self.snapshots.append(self.policy.snapshot())


@dataclass
class FedExResult:
    trials: list[Trial]
    policy: Policy | None
    incumbent: dict
    policies: dict[int, Policy] = field(default_factory=dict)
    snapshots: dict[int, list[dict]] = field(default_factory=dict)
    spent: float = 0.0


def run_fedex(bench: Benchmark, wrapper: str = "rs", wrapper_spec: Mapping | None = None,
              budget: float = math.inf, seed: int = 0, step: float = DEFAULT_STEP,
              sample_rate: float = 1.0, use_fedex: bool = True) -> FedExResult:
    """Wrapped FedEx (``use_fedex=False`` runs the bare wrapper on the same random streams).

    wrapper_spec for rs: ``n_trials`` (10) and ``rounds`` (50); for sha:
    ``schedule`` as [(n_i, r_i), ...] (default 27/9/3 at 12/13/19 rounds).
    """
    if bench.mode != "raw":
        raise ValueError("FedEx needs raw-mode evaluations")
    spec = dict(wrapper_spec or {})
    ledger = BudgetLedger(budget if math.isfinite(budget) else 1e300)
    run = Run(bench, ledger, seed=seed, sample_rate=sample_rate)
    rng = np.random.default_rng(seed)
    space = bench.space
    policies: dict[int, Policy] = {}
    snapshots: dict[int, list[dict]] = {}

    def evaluate(arm_id: int, cfg: dict, rounds: int) -> Trial:
        b = FidelityVector(rounds, sample_rate)
        explorer = None
        if use_fedex:
            explorer = FedExExplorer(Policy.uniform(space, step), [seed, arm_id, 31])
        res = bench.evaluate(cfg, b, seed=seed, ledger=ledger, explorer=explorer)
        t = Trial(dict(cfg), res.fidelity, res, ledger.spent, len(run.trials))
        run.trials.append(t)
        if explorer is not None:
            policies[t.index] = explorer.policy
            snapshots[t.index] = explorer.snapshots
        return t

    try:
        if wrapper == "rs":
            for k in range(int(spec.get("n_trials", 10))):
                evaluate(k, space.sample(rng), int(spec.get("rounds", 50)))
        elif wrapper == "sha":
            schedule = [(int(n), int(r)) for n, r in spec.get("schedule", [(27, 12), (9, 13), (3, 19)])]
            arms = [(k, space.sample(rng)) for k in range(schedule[0][0])]
            for i, (n_i, r_i) in enumerate(schedule):
                stage = [(k, evaluate(k, cfg, r_i)) for k, cfg in arms[:n_i]]
                if i + 1 < len(schedule):
                    keep = {t.index for t in top_k([t for _, t in stage], schedule[i + 1][0])}
                    arms = [(k, t.config) for k, t in stage if t.index in keep]
        else:
            raise ValueError(f"unknown FedEx wrapper {wrapper!r}; expected 'rs' or 'sha'")
    except BudgetExhausted:
        pass

    if not run.trials:
        return FedExResult([], None, {}, spent=ledger.spent)
    top_rounds = max(t.fidelity.rounds for t in run.trials)
    best = top_k([t for t in run.trials if t.fidelity.rounds == top_rounds], 1)[0]
    incumbent = dict(best.config)
    policy = policies.get(best.index)
    if policy is not None:
        incumbent.update(policy.argmax())
    return FedExResult(run.trials, policy, incumbent, policies, snapshots, ledger.spent)


def evaluate_incumbent(bench: Benchmark, incumbent: Mapping, rounds: int, seeds: Sequence[int],
                       sample_rate: float = 1.0) -> tuple[float, float]:
    """Mean and sample standard deviation of test accuracy of full courses."""
    accs = []
    for s in seeds:
        res = run_course(bench.task, bench.algorithm, incumbent, FidelityVector(rounds, sample_rate),
                         seed=s, family=bench.family)
        accs.append(res.final.global_metrics["test_acc"])
    accs = np.asarray(accs)
    std = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
    return float(accs.mean()), std


def incumbent_from_policy(base: Mapping, policy: Policy) -> dict:
    return {**base, **policy.argmax()}
