"""Causal survival forest: honest forest estimate of theta(x) with CIs.

Pipeline: (1) a censoring survival forest supplies inverse-probability-of-
censoring weights, (2) cross-fit outcome forests de-bias the horizon-
restricted log time into an augmented-inverse-propensity pseudo-outcome,
(3) an honest forest with heterogeneity-maximizing splits averages that
pseudo-outcome, and (4) per-individual variance comes from the bootstrap of
little bags: trees are grown in bags sharing a half-sample, and the spread
of bag means (minus the within-bag Monte-Carlo component) estimates the
sampling variance of the forest prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.random import SeedSequence, default_rng

from .forests import (
    CensoringSurvivalForest,
    RegressionForest,
    Tree,
    grow_regression_tree,
)

_Z95 = 1.959963984540054
_SE_FLOOR = 1e-8


class CsfError(ValueError):
    pass


@dataclass(frozen=True)
class CsfHyperparams:
    num_trees: int = 2000
    min_node_size: int = 5      # the "improved default" uses 2
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    mtry: int | None = None     # default ceil(sqrt(p) + 20) capped at p
    bag_size: int = 50
    horizon_quantile: float = 0.95

    def __post_init__(self):
        if self.min_node_size < 1:
            raise CsfError("min_node_size must be >= 1")
        for frac in (self.subsample_fraction, self.honesty_fraction):
            if not 0.0 < frac < 1.0:
                raise CsfError("fractions must lie strictly in (0, 1)")
        if self.num_trees % self.bag_size != 0:
            raise CsfError("num_trees must be divisible by bag_size")

    def resolve_mtry(self, p: int) -> int:
        if self.mtry is not None:
            return min(self.mtry, p)
        return min(int(np.ceil(np.sqrt(p) + 20)), p)


@dataclass
class NuisanceSet:
    ehat: np.ndarray        # propensity estimates, clamped upstream
    s_c: np.ndarray         # censoring survival at min(Y_i, h) given x_i
    mhat0: np.ndarray       # cross-fit E[U | A=0, x]
    mhat1: np.ndarray       # cross-fit E[U | A=1, x]
    horizon: float


@dataclass
class CsfEstimate:
    theta_hat: np.ndarray
    se: np.ndarray
    ci: np.ndarray          # n x 2


def fit_censoring_survival(X, Y, delta, seed) -> CensoringSurvivalForest:
    """Survival forest for the censoring distribution (event = not delta)."""
    delta = np.asarray(delta).astype(bool)
    forest = CensoringSurvivalForest(seed=seed)
    forest.fit(np.asarray(X, dtype=float), np.asarray(Y, dtype=float), ~delta)
    return forest


def _cross_fit_outcome(X, U, A, complete, seed, folds=5):
    """5-fold cross-fit regression forests for E[U | A=a, x] on complete cases.

    Each individual's prediction comes from forests trained without their
    fold, so the pseudo-outcome never sees its own observation.
    """
    n = U.size
    rng = default_rng(seed)
    fold_of = rng.permutation(n) % folds
    mhat = np.zeros((2, n))
    seqs = iter(SeedSequence(seed).spawn(2 * folds))
    for a in (0, 1):
        for k in range(folds):
            train = complete & (A == a) & (fold_of != k)
            sub_seed = next(seqs)
            if train.sum() < 10:
                mhat[a, fold_of == k] = U[complete & (A == a)].mean()
                continue
            forest = RegressionForest(num_trees=100, min_leaf=5,
                                      seed=sub_seed.generate_state(1)[0])
            forest.fit(X[train], U[train])
            hold = fold_of == k
            mhat[a, hold] = forest.predict(X[hold])
    return mhat[0], mhat[1]


def fit_nuisances(data, hyper: CsfHyperparams, seed) -> NuisanceSet:
    X = np.asarray(data.X, dtype=float)
    Y = np.asarray(data.Y, dtype=float)
    delta = np.asarray(data.delta).astype(bool)
    A = np.asarray(data.A).astype(int)
    ehat = np.asarray(data.X[:, -1], dtype=float)
    h = float(np.quantile(Y, hyper.horizon_quantile))
    seq = SeedSequence(seed).spawn(2)
    cens = fit_censoring_survival(X, Y, delta, seq[0].generate_state(1)[0])
    s_c = cens.evaluate(X, np.minimum(Y, h))
    U = np.log(np.minimum(Y, h))
    complete = delta | (Y >= h)
    mhat0, mhat1 = _cross_fit_outcome(X, U, A, complete,
                                      seq[1].generate_state(1)[0])
    return NuisanceSet(ehat=ehat, s_c=s_c, mhat0=mhat0, mhat1=mhat1, horizon=h)


def compute_pseudo_outcomes(data, nuisance: NuisanceSet) -> np.ndarray:
    """De-biased AIPW-IPCW pseudo-outcome for the log-time contrast."""
    Y = np.asarray(data.Y, dtype=float)
    delta = np.asarray(data.delta).astype(bool)
    A = np.asarray(data.A, dtype=float)
    e = np.asarray(nuisance.ehat, dtype=float)
    if e.min() < 0.01 - 1e-12 or e.max() > 0.99 + 1e-12:
        raise CsfError("positivity violation")
    h = nuisance.horizon
    U = np.log(np.minimum(Y, h))
    complete = delta | (Y >= h)
    w = complete / nuisance.s_c
    m_own = np.where(A == 1, nuisance.mhat1, nuisance.mhat0)
    tau = nuisance.mhat1 - nuisance.mhat0
    return tau + (A - e) / (e * (1.0 - e)) * w * (U - m_own)


# ---------------------------------------------------------------------------
# honest forest with bootstrap-of-little-bags variance


@dataclass
class CsfForest:
    trees: list[Tree]
    bag_of_tree: np.ndarray     # bag index per tree
    in_bag: np.ndarray          # num_bags x n bag half-sample membership
    bag_size: int


def _descendant_leaves(tree: Tree, node):
    out, stack = [], [node]
    while stack:
        cur = stack.pop()
        if tree.feature[cur] >= 0:
            stack.extend((tree.left[cur], tree.right[cur]))
        else:
            out.append(cur)
    return out


def _prune_small_leaves(tree: Tree, leaf_assign, min_count):
    """Collapse leaves whose estimation count falls below min_count.

    An undersized leaf triggers collapsing its parent's entire subtree into
    a single leaf; the merged count is rechecked, so the process moves
    upward until every surviving leaf satisfies the constraint (a root-only
    tree is kept regardless).  Detached nodes are marked -2 and unreachable.
    """
    parent = np.full(tree.feature.size, -1, dtype=np.int64)
    for node in np.flatnonzero(tree.feature >= 0):
        parent[tree.left[node]] = node
        parent[tree.right[node]] = node
    counts = np.bincount(leaf_assign, minlength=tree.feature.size)
    changed = True
    while changed:
        changed = False
        for node in np.flatnonzero(tree.feature == -1):
            if counts[node] >= min_count or parent[node] == -1:
                continue
            par = parent[node]
            merged = _descendant_leaves(tree, par)
            tree.feature[par] = -1
            counts[par] = sum(counts[leaf] for leaf in merged)
            sel = np.isin(leaf_assign, merged)
            leaf_assign[sel] = par
            for leaf in merged:
                counts[leaf] = 0
                tree.feature[leaf] = -2
            changed = True
            break
    return leaf_assign


def _grow_honest_tree(X, gamma, rows, rng, mtry, min_node_size,
                      honesty_fraction):
    """One honest tree: structure from J1, leaf values from J2."""
    rows = np.asarray(rows)
    perm = rng.permutation(rows)
    n_struct = max(2, int(round(honesty_fraction * rows.size)))
    j1, j2 = np.sort(perm[:n_struct]), np.sort(perm[n_struct:])
    if j2.size == 0:
        j1, j2 = j1, j1
    tree = grow_regression_tree(X, gamma, j1, rng, mtry,
                                min_leaf=min_node_size)
    leaf_assign = tree.route(X[j2])
    leaf_assign = _prune_small_leaves(tree, leaf_assign, min_node_size)
    sums = np.bincount(leaf_assign, weights=gamma[j2],
                       minlength=tree.feature.size)
    counts = np.bincount(leaf_assign, minlength=tree.feature.size)
    root_mean = gamma[j2].mean()
    tree.value = np.where(counts > 0, sums / np.maximum(counts, 1), root_mean)
    tree.leaf_rows = [None] * tree.feature.size
    for node in np.flatnonzero(tree.feature == -1):
        tree.leaf_rows[node] = j2[leaf_assign == node]
    return tree


def grow_forest(X_aug, gamma, hyper: CsfHyperparams, seed) -> CsfForest:
    """Bagged honest trees; bags share a half-sample for the variance step."""
    X = np.asarray(X_aug, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n, p = X.shape
    if n < 4 * hyper.min_node_size:
        raise CsfError("too few observations for the requested node size")
    mtry = hyper.resolve_mtry(p)
    num_bags = hyper.num_trees // hyper.bag_size
    half = n // 2
    trees = []
    bag_of_tree = np.empty(hyper.num_trees, dtype=np.int64)
    in_bag = np.zeros((num_bags, n), dtype=bool)
    for b, bag_seq in enumerate(SeedSequence(seed).spawn(num_bags)):
        bag_rng = default_rng(bag_seq)
        bag_rows = np.sort(bag_rng.choice(n, size=half, replace=False))
        in_bag[b, bag_rows] = True
        for _ in range(hyper.bag_size):
            # subsample_fraction is relative to n; drawn inside the bag's
            # half-sample so at 0.5 each tree sees the whole half-sample
            size = max(4, int(round(hyper.subsample_fraction * n)))
            rows = bag_rng.choice(bag_rows, size=min(size, half),
                                  replace=False)
            tree = _grow_honest_tree(X, gamma, rows, bag_rng, mtry,
                                     hyper.min_node_size,
                                     hyper.honesty_fraction)
            bag_of_tree[len(trees)] = b
            trees.append(tree)
    return CsfForest(trees=trees, bag_of_tree=bag_of_tree, in_bag=in_bag,
                     bag_size=hyper.bag_size)


def predict_with_ci(forest: CsfForest, x_new, hyper: CsfHyperparams,
                    oob=False) -> CsfEstimate:
    """Forest mean with little-bags standard errors.

    With `oob=True`, x_new must be the training matrix; each row is scored
    only by bags whose half-sample excluded it, giving out-of-bag estimates
    for in-sample individuals.
    """
    X = np.asarray(x_new, dtype=float)
    n = X.shape[0]
    num_bags = forest.in_bag.shape[0]
    ell = forest.bag_size
    preds = np.empty((len(forest.trees), n))
    for t, tree in enumerate(forest.trees):
        preds[t] = tree.predict(X)
    bag_sum = np.zeros((num_bags, n))
    bag_sumsq = np.zeros((num_bags, n))
    for t in range(len(forest.trees)):
        b = forest.bag_of_tree[t]
        bag_sum[b] += preds[t]
        bag_sumsq[b] += preds[t] ** 2
    bag_mean = bag_sum / ell
    bag_var = bag_sumsq / ell - bag_mean**2     # within-bag spread
    if oob:
        if forest.in_bag.shape[1] != n:
            raise CsfError("oob prediction needs the training matrix")
        allowed = ~forest.in_bag                # bags that excluded row i
        # rows inside every bag (possible only for tiny n) fall back to all
        none = ~allowed.any(axis=0)
        allowed[:, none] = True
    else:
        allowed = np.ones((num_bags, n), dtype=bool)
    k = allowed.sum(axis=0).astype(float)
    theta_hat = (bag_mean * allowed).sum(axis=0) / k
    v_between = ((bag_mean - theta_hat) ** 2 * allowed).sum(axis=0) / k
    v_within = (bag_var * allowed).sum(axis=0) / k
    se = np.sqrt(np.maximum(v_between - v_within / ell, _SE_FLOOR))
    ci = np.column_stack([theta_hat - _Z95 * se, theta_hat + _Z95 * se])
    return CsfEstimate(theta_hat=theta_hat, se=se, ci=ci)


def csf_estimate_ite(data, hyper: CsfHyperparams, seed) -> CsfEstimate:
    """Full pipeline on a propensity-augmented dataset; OOB for in-sample x."""
    seq = SeedSequence(seed).spawn(2)
    nuisance = fit_nuisances(data, hyper, seq[0].generate_state(1)[0])
    gamma = compute_pseudo_outcomes(data, nuisance)
    forest = grow_forest(data.X, gamma, hyper, seq[1].generate_state(1)[0])
    return predict_with_ci(forest, data.X, hyper, oob=True)


def null_flags_vs_mean(estimate: CsfEstimate) -> float:
    """Proportion of individuals whose CI excludes the forest-wide mean."""
    theta_bar = estimate.theta_hat.mean()
    lo, hi = estimate.ci[:, 0], estimate.ci[:, 1]
    return float(((theta_bar < lo) | (theta_bar > hi)).mean())
