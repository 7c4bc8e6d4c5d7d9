from __future__ import annotations

import numpy as np

from .base import BudgetExhausted, Run


def random_search(run: Run, rng: np.random.Generator) -> None:
    """Independent uniform draws at full fidelity until the budget runs out."""
    space = run.space
    try:
        while True:
            run.evaluate(space.sample(rng))
    except BudgetExhausted:
        return
