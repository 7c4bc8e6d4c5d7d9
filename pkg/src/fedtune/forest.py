"""Random-forest regression (CART, variance-reduction splits, bootstrap bagging)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np


@numba.njit(cache=True)
def _build_tree(X, y, sample, max_depth, min_leaf):
    n = sample.shape[0]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    order = sample.copy()
    buf = np.empty(n, dtype=np.int64)

    # stack of (node, start, end, depth)
    stack = np.empty((cap, 4), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    n_feat = X.shape[1]
    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        m = end - start
        # sums are taken relative to the first target so constant nodes are exact
        y0 = y[order[start]]
        s = 0.0
        ss = 0.0
        for i in range(start, end):
            v = y[order[i]] - y0
            s += v
            ss += v * v
        value[node] = y0 + s / m
        total = ss - s * s / m
        if depth >= max_depth or m < 2 * min_leaf or total <= 1e-12 * max(1.0, ss):
            continue
        best_gain = 1e-12 * max(1.0, ss)
        best_f = -1
        best_t = 0.0
        seg = order[start:end]
        for f in range(n_feat):
            xs = np.empty(m)
            for i in range(m):
                xs[i] = X[seg[i], f]
            srt = np.argsort(xs, kind="mergesort")
            sl = 0.0
            ssl = 0.0
            for i in range(m - 1):
                v = y[seg[srt[i]]] - y0
                sl += v
                ssl += v * v
                nl = i + 1
                nr = m - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                xa = xs[srt[i]]
                xb = xs[srt[i + 1]]
                if xa == xb:
                    continue
                sr = s - sl
                ssr = ss - ssl
                sse = (ssl - sl * sl / nl) + (ssr - sr * sr / nr)
                gain = total - sse
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_t = 0.5 * (xa + xb)
                    if best_t == xb:
                        best_t = xa
        if best_f < 0:
            continue
        # stable partition of the node's samples
        nl = 0
        for i in range(start, end):
            if X[order[i], best_f] <= best_t:
                buf[nl] = order[i]
                nl += 1
        k = nl
        for i in range(start, end):
            if X[order[i], best_f] > best_t:
                buf[k] = order[i]
                k += 1
        for i in range(m):
            order[start + i] = buf[i]
        feature[node] = best_f
        threshold[node] = best_t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack[top, 0] = n_nodes + 1
        stack[top, 1] = start + nl
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = n_nodes
        stack[top, 1] = start
        stack[top, 2] = start + nl
        stack[top, 3] = depth + 1
        top += 1
        n_nodes += 2
    return feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@numba.njit(cache=True)
def _predict_tree(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for r in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = value[node]
    return out


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _predict_tree(np.ascontiguousarray(X, dtype=np.float64), self.feature,
                             self.threshold, self.left, self.right, self.value)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())


@dataclass
class RandomForest:
    n_trees: int = 10
    max_depth: int = 10
    min_leaf: int = 1
    seed: int = 0
    trees: list[Tree] = field(default_factory=list)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "RandomForest":
        X = np.ascontiguousarray(X, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64)
        n = len(y)
        if n == 0:
            raise ValueError("cannot fit a forest on zero rows")
        self.trees = []
        for t in range(self.n_trees):
            rng = np.random.default_rng([self.seed, t])
            sample = rng.integers(0, n, size=n).astype(np.int64)
            self.trees.append(Tree(*_build_tree(X, y, sample, self.max_depth, self.min_leaf)))
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise RuntimeError("forest is not fitted")
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        preds = np.array([t.predict(X) for t in self.trees])
        return preds[0] + (preds - preds[0]).mean(axis=0)
