"""Differential evolution (rand/1/bin) over the unit-cube encoding."""

from __future__ import annotations

import numpy as np

from .base import BudgetExhausted, Run, lhs


def mutate_rand1(pop: np.ndarray, target: int, F: float, rng: np.random.Generator) -> np.ndarray:
    candidates = [i for i in range(len(pop)) if i != target] if len(pop) > 3 else list(range(len(pop)))
    r1, r2, r3 = rng.choice(candidates, size=3, replace=len(candidates) < 3)
    return np.clip(pop[r1] + F * (pop[r2] - pop[r3]), 0.0, 1.0)


def crossover_bin(target: np.ndarray, mutant: np.ndarray, CR: float, rng: np.random.Generator) -> np.ndarray:
    d = len(target)
    mask = rng.random(d) < CR
    mask[rng.integers(d)] = True
    return np.where(mask, mutant, target)


def differential_evolution(run: Run, rng: np.random.Generator, pop_size: int = 20,
                           F: float = 0.5, CR: float = 0.5) -> None:
    space = run.space
    d = len(space)
    pop = lhs(pop_size, d, rng)
    fitness = np.full(pop_size, np.inf)
    try:
        for i in range(pop_size):
            fitness[i] = run.evaluate(space.from_unit(pop[i])).loss
        while True:
            for i in range(pop_size):
                trial = crossover_bin(pop[i], mutate_rand1(pop, i, F, rng), CR, rng)
                loss = run.evaluate(space.from_unit(trial)).loss
                if loss <= fitness[i]:
                    pop[i], fitness[i] = trial, loss
    except BudgetExhausted:
        return
