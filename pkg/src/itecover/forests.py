"""Shared tree and forest machinery.

Flat-array binary trees with axis-aligned splits, grown greedily.  Three
consumers: a probability forest for treatment assignment (variance-reduction
splits on a 0/1 target, equivalent to Gini), cross-fit regression forests
for nuisance outcome models, and a censoring survival forest with log-rank
splits and per-leaf Kaplan-Meier curves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.random import SeedSequence, default_rng


@dataclass
class Tree:
    feature: np.ndarray    # split covariate per node, -1 at leaves
    threshold: np.ndarray  # split value; x <= threshold goes left
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray      # leaf prediction (unused for survival leaves)
    leaf_rows: list | None = None  # training rows routed to each leaf node

    def route(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index for every row of X."""
        idx = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = self.feature[idx]
            active = np.flatnonzero(f >= 0)
            if active.size == 0:
                return idx
            node = idx[active]
            go_left = X[active, f[active]] <= self.threshold[node]
            idx[active] = np.where(go_left, self.left[node], self.right[node])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.route(X)]


def best_split_variance(X, y, rows, feats, min_leaf):
    """Best variance-reduction split of `rows` over candidate features.

    Returns (gain, feature, threshold); gain <= 0 means no valid split.
    """
    x = X[np.ix_(rows, feats)]
    ys = y[rows]
    k = rows.size
    order = np.argsort(x, axis=0, kind="stable")
    xs = np.take_along_axis(x, order, axis=0)
    ysort = ys[order]
    prefix = np.cumsum(ysort, axis=0)
    total = prefix[-1]
    n_left = np.arange(1, k, dtype=float)[:, None]
    s_left = prefix[:-1]
    gain = (
        s_left**2 / n_left
        + (total - s_left) ** 2 / (k - n_left)
        - total**2 / k
    )
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (k - n_left >= min_leaf)
    gain[~valid] = -np.inf
    pos = np.unravel_index(np.argmax(gain), gain.shape)
    if not np.isfinite(gain[pos]) or gain[pos] <= 1e-12:
        return 0.0, -1, np.nan
    i, j = pos
    thr = 0.5 * (xs[i, j] + xs[i + 1, j])
    return float(gain[pos]), int(feats[j]), float(thr)


def grow_regression_tree(X, y, rows, rng, mtry, min_leaf, max_depth=30,
                         keep_leaf_rows=False) -> Tree:
    """Greedy SSE-minimizing tree; leaf value = mean response."""
    feature, threshold, left, right, value = [], [], [], [], []
    leaf_rows = [] if keep_leaf_rows else None
    p = X.shape[1]

    def new_node():
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        if keep_leaf_rows:
            leaf_rows.append(None)
        return len(feature) - 1

    stack = [(new_node(), rows, 0)]
    while stack:
        node, node_rows, depth = stack.pop()
        split = None
        if depth < max_depth and node_rows.size >= 2 * min_leaf:
            feats = rng.choice(p, size=min(mtry, p), replace=False)
            gain, f, thr = best_split_variance(X, y, node_rows, feats, min_leaf)
            if f >= 0:
                split = (f, thr)
        if split is None:
            value[node] = float(y[node_rows].mean())
            if keep_leaf_rows:
                leaf_rows[node] = node_rows
            continue
        f, thr = split
        go_left = X[node_rows, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node] = new_node()
        right[node] = new_node()
        stack.append((left[node], node_rows[go_left], depth + 1))
        stack.append((right[node], node_rows[~go_left], depth + 1))

    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value),
        leaf_rows=leaf_rows,
    )


class RegressionForest:
    """Subsampled (without replacement) regression forest with OOB predictions."""

    def __init__(self, num_trees=200, subsample=0.5, mtry=None, min_leaf=5,
                 seed=0):
        self.num_trees = num_trees
        self.subsample = subsample
        self.mtry = mtry
        self.min_leaf = min_leaf
        self.seed = seed
        self.trees: list[Tree] = []
        self.in_tree: np.ndarray | None = None  # num_trees x n membership

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        n, p = X.shape
        mtry = self.mtry or max(1, int(np.ceil(np.sqrt(p))))
        size = max(2 * self.min_leaf, int(round(self.subsample * n)))
        size = min(size, n)
        self.in_tree = np.zeros((self.num_trees, n), dtype=bool)
        self.trees = []
        for t, seq in enumerate(SeedSequence(self.seed).spawn(self.num_trees)):
            rng = default_rng(seq)
            rows = rng.choice(n, size=size, replace=False)
            self.trees.append(
                grow_regression_tree(X, y, np.sort(rows), rng, mtry, self.min_leaf)
            )
            self.in_tree[t, rows] = True
        return self

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        acc = np.zeros(X.shape[0])
        for tree in self.trees:
            acc += tree.predict(X)
        return acc / len(self.trees)

    def predict_oob(self, X_train) -> np.ndarray:
        """Per-row average over trees whose subsample excluded the row."""
        X_train = np.asarray(X_train, dtype=float)
        n = X_train.shape[0]
        acc = np.zeros(n)
        cnt = np.zeros(n)
        for t, tree in enumerate(self.trees):
            oob = ~self.in_tree[t]
            if oob.any():
                acc[oob] += tree.predict(X_train[oob])
                cnt[oob] += 1
        full = self.predict(X_train)  # fallback for rows in every subsample
        out = np.where(cnt > 0, acc / np.maximum(cnt, 1), full)
        return out


class ProbabilityForest(RegressionForest):
    """Classification forest; OOB leaf means of a 0/1 target are P(A=1|x)."""

    def __init__(self, num_trees=200, subsample=0.5, min_leaf=10, seed=0):
        super().__init__(num_trees=num_trees, subsample=subsample, mtry=None,
                         min_leaf=min_leaf, seed=seed)

    def fit(self, X, A):
        A = np.asarray(A, dtype=float)
        if not np.isin(A, (0.0, 1.0)).all():
            raise ValueError("treatment must be binary")
        return super().fit(X, A)


# ---------------------------------------------------------------------------
# censoring survival forest


def _logrank_stat(order_e, group_sorted, at_risk_total):
    """Two-sample log-rank statistic; inputs sorted by time ascending."""
    rl = group_sorted[::-1].cumsum()[::-1].astype(float)  # left-group at risk
    frac = rl / at_risk_total
    events = order_e
    o_minus_e = (group_sorted[events]).sum() - frac[events].sum()
    var = (frac[events] * (1.0 - frac[events])).sum()
    if var <= 0.0:
        return 0.0
    return o_minus_e**2 / var


@dataclass
class KaplanMeierCurve:
    times: np.ndarray
    surv: np.ndarray

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.times.size == 0:  # no events observed in this leaf
            return np.ones_like(t)
        pos = np.searchsorted(self.times, t, side="right")
        return np.where(pos == 0, 1.0, self.surv[np.maximum(pos - 1, 0)])


def kaplan_meier(y, event) -> KaplanMeierCurve:
    """Product-limit estimate of P(time > t) for the flagged event type."""
    order = np.argsort(y, kind="stable")
    ys, es = y[order], event[order]
    times, start = np.unique(ys, return_index=True)
    n = ys.size
    at_risk = n - start
    d = np.add.reduceat(es.astype(float), start)
    surv = np.cumprod(1.0 - d / at_risk)
    keep = d > 0
    return KaplanMeierCurve(times=times[keep], surv=surv[keep])


class CensoringSurvivalForest:
    """Forest estimate of the censoring survival function S_C(t | x).

    Trees split on the log-rank statistic for the censoring event (delta
    flipped by the caller) over a quantile grid of candidate cut points;
    each leaf stores a Kaplan-Meier curve.  Evaluations are forest averages
    floored at `floor`.
    """

    def __init__(self, num_trees=500, subsample=0.5, min_leaf=15,
                 n_cuts=8, max_depth=8, floor=0.05, seed=0):
        self.num_trees = num_trees
        self.subsample = subsample
        self.min_leaf = min_leaf
        self.n_cuts = n_cuts
        self.max_depth = max_depth
        self.floor = floor
        self.seed = seed
        self.trees: list[Tree] = []
        self.leaf_curves: list[dict[int, KaplanMeierCurve]] = []
        self.constant = False

    def fit(self, X, y, censor_event):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        censor_event = np.asarray(censor_event).astype(bool)
        n, p = X.shape
        if not censor_event.any():
            self.constant = True
            return self
        mtry = max(1, int(np.ceil(np.sqrt(p))))
        size = min(n, max(4 * self.min_leaf, int(round(self.subsample * n))))
        for seq in SeedSequence(self.seed).spawn(self.num_trees):
            rng = default_rng(seq)
            rows = np.sort(rng.choice(n, size=size, replace=False))
            tree = self._grow(X, y, censor_event, rows, rng, mtry)
            curves = {
                int(node): kaplan_meier(y[tree.leaf_rows[node]],
                                        censor_event[tree.leaf_rows[node]])
                for node in np.flatnonzero(tree.feature < 0)
            }
            self.trees.append(tree)
            self.leaf_curves.append(curves)
        return self

    def _grow(self, X, y, event, rows, rng, mtry):
        feature, threshold, left, right = [], [], [], []
        leaf_rows = []

        def new_node():
            feature.append(-1)
            threshold.append(np.nan)
            left.append(-1)
            right.append(-1)
            leaf_rows.append(None)
            return len(feature) - 1

        stack = [(new_node(), rows, 0)]
        while stack:
            node, node_rows, depth = stack.pop()
            split = None
            if depth < self.max_depth and node_rows.size >= 2 * self.min_leaf:
                split = self._best_logrank_split(X, y, event, node_rows, rng, mtry)
            if split is None:
                leaf_rows[node] = node_rows
                continue
            f, thr = split
            go_left = X[node_rows, f] <= thr
            feature[node], threshold[node] = f, thr
            left[node] = new_node()
            right[node] = new_node()
            stack.append((left[node], node_rows[go_left], depth + 1))
            stack.append((right[node], node_rows[~go_left], depth + 1))

        return Tree(
            feature=np.array(feature, dtype=np.int64),
            threshold=np.array(threshold),
            left=np.array(left, dtype=np.int64),
            right=np.array(right, dtype=np.int64),
            value=np.zeros(len(feature)),
            leaf_rows=leaf_rows,
        )

    def _best_logrank_split(self, X, y, event, rows, rng, mtry):
        order = rows[np.argsort(y[rows], kind="stable")]
        e_sorted = event[order]
        if not e_sorted.any():
            return None
        k = rows.size
        at_risk = np.arange(k, 0, -1, dtype=float)
        feats = rng.choice(X.shape[1], size=mtry, replace=False)
        best, best_split = 0.0, None
        for f in feats:
            xv = X[rows, f]
            qs = np.quantile(xv, np.linspace(0.1, 0.9, self.n_cuts))
            for thr in np.unique(qs):
                member = X[order, f] <= thr
                n_left = int(member.sum())
                if n_left < self.min_leaf or k - n_left < self.min_leaf:
                    continue
                stat = _logrank_stat(e_sorted, member, at_risk)
                if stat > best:
                    best, best_split = stat, (int(f), float(thr))
        return best_split

    def evaluate(self, X, t) -> np.ndarray:
        """Forest-averaged S_C(t_i | x_i), floored."""
        X = np.asarray(X, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.constant:
            return np.ones(X.shape[0])
        acc = np.zeros(X.shape[0])
        for tree, curves in zip(self.trees, self.leaf_curves):
            leaf = tree.route(X)
            for node in np.unique(leaf):
                mask = leaf == node
                acc[mask] += curves[int(node)](t[mask])
        return np.maximum(acc / len(self.trees), self.floor)
