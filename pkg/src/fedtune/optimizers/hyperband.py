"""Successive halving, Hyperband and their model-based variants (BOHB, DEHB)."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .base import BudgetExhausted, Run, Trial, lhs
from .de import crossover_bin, mutate_rand1
from .kde import KDEParams, KDEProposer

Schedule = list[tuple[int, int]]

# Published one-shot schedule (27 configs, three stages of 12/13/19 rounds over a
# 500-round budget); no growth rule reproduces it, so it is kept verbatim.
KNOWN_SCHEDULES: dict[tuple[int, int, int, int], Schedule] = {
    (27, 3, 3, 500): [(27, 12), (9, 13), (3, 19)],
}


def schedule_cost(schedule: Schedule) -> int:
    return sum(n * r for n, r in schedule)


def sha_schedule(n0: int, eta: int, stages: int, total_rounds: int) -> Schedule:
    """Stage plan [(n_i, r_i)] for one-shot successive halving.

    n_i = floor(n0 / eta^i). Rounds grow geometrically, r_i = r_0 * eta^i,
    with the largest r_0 whose total cost fits in ``total_rounds``.
    """
    if stages < 1 or eta < 2:
        raise ValueError("need stages >= 1 and eta >= 2")
    if n0 < eta ** (stages - 1):
        raise ValueError(f"n0={n0} cannot be halved {stages - 1} times by eta={eta}")
    known = KNOWN_SCHEDULES.get((n0, eta, stages, total_rounds))
    if known is not None:
        return list(known)
    ns = [n0 // eta ** i for i in range(stages)]
    if stages == 1:
        return [(n0, total_rounds // n0)] if total_rounds >= n0 else _infeasible(n0, total_rounds)
    r0 = total_rounds // sum(n * eta ** i for i, n in enumerate(ns))
    if r0 < 1:
        _infeasible(n0, total_rounds)
    return [(n, r0 * eta ** i) for i, n in enumerate(ns)]


def _infeasible(n0, total):
    raise ValueError(f"no schedule for {n0} configurations fits in {total} rounds")


def hyperband_brackets(max_rounds: int, eta: int = 3, min_rounds: int = 1) -> list[Schedule]:
    """Standard Hyperband brackets, most exploratory first."""
    s_max = int(math.floor(math.log(max_rounds / min_rounds) / math.log(eta) + 1e-9))
    out = []
    for s in range(s_max, -1, -1):
        n = int(math.ceil((s_max + 1) / (s + 1) * eta ** s))
        r = max_rounds * eta ** (-s)
        out.append([(n // eta ** i if i else n, max(1, int(round(r * eta ** i)))) for i in range(s + 1)])
    return out


def top_k(trials: Sequence[Trial], k: int) -> list[Trial]:
    """Best k by validation loss; ties go to the earlier trial."""
    return sorted(trials, key=lambda t: (t.loss, t.index))[:k]


Sampler = Callable[[int, int], list[dict]]


def successive_halving(run: Run, schedule: Schedule, configs: list[dict],
                       promote: Callable[[list[Trial], int, int], list[dict]] | None = None
                       ) -> list[Trial]:
    """Evaluate ``configs`` through the stages of ``schedule``; returns all trials made."""
    made: list[Trial] = []
    current = configs
    for i, (n_i, r_i) in enumerate(schedule):
        stage = [run.evaluate(c, run.rounds(r_i)) for c in current[:n_i]]
        made += stage
        if i + 1 < len(schedule):
            n_next, r_next = schedule[i + 1]
            if promote is None:
                current = [t.config for t in top_k(stage, n_next)]
            else:
                current = promote(stage, n_next, r_next)
    return made


def sha(run: Run, rng: np.random.Generator, schedule: Schedule, sampler: Sampler | None = None) -> None:
    """Repeat successive halving with fresh random configurations until out of budget."""
    sampler = sampler or (lambda n, r: [run.space.sample(rng) for _ in range(n)])
    try:
        while True:
            successive_halving(run, schedule, sampler(schedule[0][0], schedule[0][1]))
    except BudgetExhausted:
        return


def hyperband(run: Run, rng: np.random.Generator, eta: int = 3, min_rounds: int = 1,
              max_brackets: int | None = None, sampler: Sampler | None = None,
              on_bracket: Callable | None = None) -> None:
    brackets = hyperband_brackets(run.full_rounds, eta, min_rounds)
    if max_brackets is not None:
        brackets = brackets[:max_brackets]
    sampler = sampler or (lambda n, r: [run.space.sample(rng) for _ in range(n)])
    try:
        while True:
            for sched in brackets:
                if on_bracket is None:
                    successive_halving(run, sched, sampler(sched[0][0], sched[0][1]))
                else:
                    on_bracket(sched)
    except BudgetExhausted:
        return


def bohb(run: Run, rng: np.random.Generator, eta: int = 3, min_rounds: int = 1,
         kde: KDEParams | None = None, max_brackets: int | None = None) -> None:
    """Hyperband whose new configurations come from the KDE model on the highest
    fidelity that has enough observations."""
    prop = KDEProposer(run.space, rng, kde)

    def observations() -> list[tuple[dict, float]]:
        by_rounds: dict[int, list] = {}
        for t in run.trials:
            by_rounds.setdefault(t.fidelity.rounds, []).append((t.config, t.loss))
        for r in sorted(by_rounds, reverse=True):
            if len(by_rounds[r]) >= max(prop.min_points, 3) + 2:
                return by_rounds[r]
        return []

    def sampler(n, r):
        obs = observations()
        return [prop.propose(obs) for _ in range(n)]

    hyperband(run, rng, eta, min_rounds, max_brackets, sampler)


def dehb(run: Run, rng: np.random.Generator, eta: int = 3, min_rounds: int = 1,
         F: float = 0.5, CR: float = 0.5, max_brackets: int | None = None) -> None:
    """Hyperband with one DE subpopulation per round budget.

    The first stage of a bracket evolves that budget's subpopulation; later
    stages draw mutation parents from the configurations promoted out of the
    lower budget, so good regions are carried up the fidelity ladder.
    """
    space = run.space
    d = len(space)
    subpops: dict[int, list[list]] = {}  # rounds -> [[vector, loss], ...]

    def enc(cfg):
        return space.to_unit(cfg)

    def evolve(pop: list[list], n: int, parents: np.ndarray, rounds: int) -> list[Trial]:
        made = []
        for j in range(n):
            slot = j % len(pop)
            target = pop[slot][0]
            mutant = mutate_rand1(parents, -1, F, rng)
            trial_vec = crossover_bin(target, mutant, CR, rng)
            t = run.evaluate(space.from_unit(trial_vec), rounds)
            made.append(t)
            if t.loss <= pop[slot][1]:
                pop[slot] = [enc(t.config), t.loss]
        return made

    def bracket(schedule):
        current_trials: list[Trial] = []
        for i, (n_i, r_i) in enumerate(schedule):
            rounds = run.rounds(r_i)
            pop = subpops.setdefault(rounds, [])
            if i == 0:
                if len(pop) >= max(n_i, 4):
                    parents = np.array([p[0] for p in pop])
                    stage = evolve(pop, n_i, parents, rounds)
                else:
                    vecs = lhs(n_i, d, rng)
                    stage = [run.evaluate(space.from_unit(v), rounds) for v in vecs]
                    pop += [[enc(t.config), t.loss] for t in stage]
            else:
                promoted = top_k(current_trials, n_i)
                if len(pop) >= n_i and len(promoted) >= 1:
                    parents = np.array([enc(t.config) for t in promoted])
                    if len(parents) < 4:
                        extra = np.array([p[0] for p in pop])
                        parents = np.vstack([parents, extra])
                    stage = evolve(pop, n_i, parents, rounds)
                else:
                    stage = [run.evaluate(t.config, rounds) for t in promoted]
                    pop += [[enc(t.config), t.loss] for t in stage]
            current_trials = stage

    hyperband(run, rng, eta, min_rounds, max_brackets, on_bracket=bracket)
