"""Dataset ingestion, synthetic tasks and non-IID client partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_ALPHA = 0.5
DEFAULT_CLIENTS = 5
SPLIT_RATIOS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise ValueError("features must be [n, d] and labels [n]")
        if not np.all(np.isfinite(x)):
            raise ValueError("features contain NaN or Inf")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError("label index outside [0, n_classes)")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class ClientData:
    train: Dataset
    valid: Dataset
    test: Dataset


@dataclass(frozen=True)
class FederatedDataset:
    clients: tuple[ClientData, ...]
    n_features: int
    n_classes: int
    name: str = "task"

    @property
    def n_clients(self) -> int:
        return len(self.clients)


def _standardize(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    out = np.zeros_like(x)
    ok = sd > 0
    out[:, ok] = (x[:, ok] - mu[ok]) / sd[ok]
    return out


def load_csv(path, label_column: str) -> Dataset:
    """Read a headered CSV; all non-label columns must be numeric."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such data file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ValueError(f"label column {label_column!r} not in header of {path}")
        li = header.index(label_column)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            feats = []
            for j, cell in enumerate(row):
                if j == li:
                    continue
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}:{lineno}: non-numeric value {cell!r} in column {header[j]!r}"
                    ) from None
            rows.append(feats)
            labels.append(row[li].strip())
    codes: dict[str, int] = {}
    y = [codes.setdefault(lab, len(codes)) for lab in labels]
    if len(codes) < 2:
        raise ValueError(f"{path}: label column has a single class")
    x = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{path}: non-finite feature values")
    return Dataset(_standardize(x), np.asarray(y), len(codes))


def synth_blobs(n_samples: int, n_features: int, n_classes: int, spread: float, seed: int) -> Dataset:
    """Gaussian blobs around class means placed on the unit sphere."""
    if min(n_samples, n_features, n_classes) <= 0 or spread <= 0:
        raise ValueError("counts must be positive and spread > 0")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, n_features))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.arange(n_samples) % n_classes
    labels = labels[rng.permutation(n_samples)]
    x = means[labels] + spread * rng.standard_normal((n_samples, n_features))
    return Dataset(x, labels, n_classes)


def lda_split(data: Dataset, n_clients: int, alpha: float = DEFAULT_ALPHA, seed: int = 0,
              min_size: int = 1) -> list[np.ndarray]:
    """Label-skewed partition: each class is spread over clients by a Dirichlet draw.

    Clients holding fewer than ``min_size`` samples take one sample at a time
    from the currently largest client.
    """
    n = len(data)
    if n_clients < 1 or alpha <= 0:
        raise ValueError("need n_clients >= 1 and alpha > 0")
    if n_clients * min_size > n:
        raise ValueError(f"cannot give {n_clients} clients {min_size} samples from {n}")
    rng = np.random.default_rng(seed)
    shards: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(data.n_classes):
        idx = np.flatnonzero(data.labels == c)
        if len(idx) == 0:
            continue
        idx = idx[rng.permutation(len(idx))]
        p = rng.dirichlet(np.full(n_clients, alpha))
        counts = rng.multinomial(len(idx), p)
        for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            shards[k].extend(part.tolist())
    while True:
        sizes = [len(s) for s in shards]
        short = [k for k in range(n_clients) if sizes[k] < min_size]
        if not short:
            break
        donor = int(np.argmax(sizes))
        shards[donor].sort()
        shards[short[0]].append(shards[donor].pop())
    return [np.sort(np.asarray(s, dtype=np.int64)) for s in shards]


def split_tvt(indices, ratios=SPLIT_RATIOS, seed: int = 0) -> dict[str, np.ndarray]:
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indices)
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    rng = np.random.default_rng(seed)
    perm = indices[rng.permutation(n)]
    n_valid = int(math.floor(ratios[1] * n))
    n_test = int(math.floor(ratios[2] * n))
    n_train = n - n_valid - n_test
    return {
        "train": perm[:n_train],
        "valid": perm[n_train:n_train + n_valid],
        "test": perm[n_train + n_valid:],
    }


def federate(data: Dataset, n_clients: int = DEFAULT_CLIENTS, alpha: float = DEFAULT_ALPHA,
             seed: int = 0, name: str = "task") -> FederatedDataset:
    shards = lda_split(data, n_clients, alpha, seed, min_size=3)
    clients = []
    for k, shard in enumerate(shards):
        parts = split_tvt(shard, seed=seed * 1_000_003 + k)
        clients.append(ClientData(*(data.subset(parts[s]) for s in ("train", "valid", "test"))))
    return FederatedDataset(tuple(clients), data.n_features, data.n_classes, name)
