import numpy as np
import pytest

from fedtune.dataflow import federate, synth_blobs
from fedtune.space import CATEGORICAL, CONTINUOUS, INTEGER, Dimension, SearchSpace


@pytest.fixture(scope="session")
def blobs_task():
    """Small 5-client, 3-class task used across the suite."""
    return federate(synth_blobs(300, 6, 3, 1.0, seed=3), n_clients=5, alpha=0.5, seed=0, name="blobs")


@pytest.fixture(scope="session")
def tiny_space():
    """6-point LR grid (3 learning rates x 2 batch sizes)."""
    return SearchSpace((
        Dimension("learning_rate", CONTINUOUS, 0.01, 1.0, log=True, bins=3),
        Dimension("batch_size", INTEGER, 16, 32, log=True, bins=2),
    ), family="lr", algorithm="fedavg")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


class AcceptanceLog:
    def record(self, number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


@pytest.fixture(scope="session")
def artifact_dir(request, tmp_path_factory):
    """Persistent directory for expensive tables (pytest cache), else a temp dir."""
    cache = getattr(request.config, "cache", None)
    if cache is not None:
        return cache.mkdir("fedtune-acceptance")
    return tmp_path_factory.mktemp("acceptance")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
