"""Semiparametric accelerated-failure-time sum-of-trees sampler.

Models log survival time as a sum of regression trees plus Gaussian noise,
with right-censored observations imputed from their truncated-normal full
conditional at every sweep.  Tree structures move by Metropolis-Hastings
grow/prune/change proposals under the usual depth-penalizing prior; leaf
means and the noise variance have conjugate updates.  Treatment is included
as an ordinary splittable covariate, and every retained sweep records the
difference between the fit with treatment forced to 1 and forced to 0,
which is the individualized effect on the log-time scale.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.random import default_rng
from scipy.special import ndtr, ndtri
from scipy.stats import chi2

_MOVE_PROBS = {"grow": 0.28, "prune": 0.28, "change": 0.44}
_MAX_CUTS = 100
_POSTERIOR_MAGIC = b"BARTPOST"


class BartError(ValueError):
    pass


@dataclass(frozen=True)
class BartHyperparams:
    num_trees: int = 200
    k: float = 2.0          # leaf shrinkage; the "improved default" uses 1
    alpha: float = 0.95     # depth prior: P(split at depth d) = alpha (1+d)^-beta
    beta: float = 2.0
    nu: float = 3.0
    q: float = 0.90
    iterations: int = 2500
    burn_in: int = 500
    thin: int = 1

    def __post_init__(self):
        if self.num_trees < 1 or self.k <= 0 or not 0 < self.alpha < 1:
            raise BartError("invalid tree or shrinkage hyperparameters")
        if self.burn_in >= self.iterations:
            raise BartError("burn_in must be smaller than iterations")


@dataclass
class BartPosterior:
    theta_draws: np.ndarray       # n x S retained effect draws
    sigma_draws: np.ndarray       # S residual scale draws
    acceptance_stats: dict[str, float]


def sample_truncated_normal(mu, sigma, lower, seed_or_rng):
    """Exact draws from Normal(mu, sigma^2) conditioned on value > lower.

    Inverse-CDF in the bulk; for deep truncation ((lower-mu)/sigma > 4) an
    exponential-proposal rejection sampler keeps full tail accuracy.
    """
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else default_rng(seed_or_rng)
    )
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), mu.shape)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), mu.shape)
    if (sigma <= 0).any():
        raise BartError("sigma must be positive")
    a = (lower - mu) / sigma
    z = np.empty_like(a)

    bulk = a <= 4.0
    if bulk.any():
        ab = a[bulk]
        tail_mass = ndtr(-ab)  # P(Z > a), accurate for all a
        u = rng.uniform(size=ab.shape)
        z[bulk] = -ndtri(tail_mass * (1.0 - u))
    deep = ~bulk
    if deep.any():
        z[deep] = _tail_rejection(a[deep], rng)
    return mu + sigma * z


def _tail_rejection(a, rng):
    """Exponential-proposal rejection for Z ~ N(0,1) | Z > a with large a."""
    lam = 0.5 * (a + np.sqrt(a**2 + 4.0))
    out = np.full(a.shape, np.nan)
    todo = np.ones(a.shape, dtype=bool)
    while todo.any():
        lam_t = lam[todo]
        x = a[todo] + rng.exponential(size=lam_t.shape) / lam_t
        accept = rng.uniform(size=lam_t.shape) <= np.exp(-0.5 * (x - lam_t) ** 2)
        idx = np.flatnonzero(todo)[accept]
        out[idx] = x[accept]
        todo[idx] = False
    return out


class _Tree:
    """Mutable binary tree with per-design leaf assignments.

    `leaf_tr` routes the training design; `leaf_1` / `leaf_0` route the
    counterfactual designs with the treatment column forced to 1 / 0.
    Pruned node slots are marked dead (feature -2) and recycled by later
    grows so the arrays stay as small as the live tree.
    """

    __slots__ = ("feature", "cut", "left", "right", "depth", "mu",
                 "leaf_tr", "leaf_1", "leaf_0", "free")

    def __init__(self, n_train):
        self.feature = [-1]
        self.cut = [np.nan]
        self.left = [-1]
        self.right = [-1]
        self.depth = [0]
        self.mu = np.zeros(1)
        self.free = []
        self.leaf_tr = np.zeros(n_train, dtype=np.int64)
        self.leaf_1 = np.zeros(n_train, dtype=np.int64)
        self.leaf_0 = np.zeros(n_train, dtype=np.int64)

    def live_leaves(self):
        return [i for i, f in enumerate(self.feature) if f == -1]

    def nog_nodes(self):
        """Internal nodes whose children are both leaves."""
        return [
            i
            for i, f in enumerate(self.feature)
            if f >= 0
            and self.feature[self.left[i]] == -1
            and self.feature[self.right[i]] == -1
        ]

    def _new_slot(self, depth):
        if self.free:
            i = self.free.pop()
            self.feature[i] = -1
            self.cut[i] = np.nan
            self.left[i] = self.right[i] = -1
            self.depth[i] = depth
            self.mu[i] = 0.0
            return i
        self.feature.append(-1)
        self.cut.append(np.nan)
        self.left.append(-1)
        self.right.append(-1)
        self.depth.append(depth)
        self.mu = np.append(self.mu, 0.0)
        return len(self.feature) - 1

    def add_children(self, node, f, c):
        l = self._new_slot(self.depth[node] + 1)
        r = self._new_slot(self.depth[node] + 1)
        self.feature[node] = f
        self.cut[node] = c
        self.left[node], self.right[node] = l, r
        return l, r

    def drop_children(self, node):
        l, r = self.left[node], self.right[node]
        self.feature[l] = self.feature[r] = -2
        self.feature[node] = -1
        self.cut[node] = np.nan
        self.left[node] = self.right[node] = -1
        self.free.extend((l, r))


class _Sampler:
    """One-chain Gibbs state over the tree ensemble.

    The full residual `resid` (outcome minus ensemble fit) is maintained
    incrementally; each tree sees its partial residual as `resid` plus its
    own prediction.  The counterfactual effect vector `theta` is likewise
    maintained sparsely: a tree contributes only at rows where its two
    counterfactual routings disagree, which requires a split on treatment.
    """

    def __init__(self, X_design, X_one, X_zero, hyper, rng):
        self.X = np.asarray(X_design, dtype=float)
        self.X1 = np.asarray(X_one, dtype=float)
        self.X0 = np.asarray(X_zero, dtype=float)
        self.hyper = hyper
        self.rng = rng
        self.n, self.p = self.X.shape
        self.cutgrids = [self._grid(self.X[:, j]) for j in range(self.p)]
        J = hyper.num_trees
        self.trees = [_Tree(self.n) for _ in range(J)]
        self.aff = [np.empty(0, dtype=np.int64) for _ in range(J)]
        self.contrib = [np.empty(0) for _ in range(J)]
        self.resid = np.zeros(self.n)   # outcome minus full ensemble fit
        self.theta = np.zeros(self.n)   # ensemble fit at A=1 minus A=0
        self.sigma_mu = 1.0 / (2.0 * hyper.k * np.sqrt(J))
        self.accept_counts = {m: 0 for m in _MOVE_PROBS}
        self.propose_counts = {m: 0 for m in _MOVE_PROBS}

    @staticmethod
    def _grid(col):
        uniq = np.unique(col)
        if uniq.size > _MAX_CUTS:
            uniq = np.unique(np.quantile(uniq, np.linspace(0, 1, _MAX_CUTS)))
        return uniq

    def set_outcome(self, z):
        """Initialize or refresh the residual for a new outcome vector."""
        self.resid = z - self.ensemble_pred("tr")
        return self.resid

    def ensemble_pred(self, which="tr"):
        attr = {"tr": "leaf_tr", "1": "leaf_1", "0": "leaf_0"}[which]
        acc = np.zeros(self.n)
        for tree in self.trees:
            acc += tree.mu[getattr(tree, attr)]
        return acc

    def _leaf_loglik(self, n, s, sigma2):
        v = self.sigma_mu**2
        return -0.5 * np.log1p(n * v / sigma2) + v * s * s / (
            2.0 * sigma2 * (sigma2 + n * v)
        )

    def _valid_cut_range(self, node_rows, f):
        x = self.X[node_rows, f]
        lo, hi = x.min(), x.max()
        if lo == hi:
            return None
        grid = self.cutgrids[f]
        # cuts with lo <= c < hi leave both children nonempty
        start = np.searchsorted(grid, lo, side="left")
        stop = np.searchsorted(grid, hi, side="left")
        if stop <= start:
            return None
        return grid, start, stop

    def _draw_rule(self, node_rows):
        """Propose (feature, cut) uniformly; None when the pick is unsplittable.

        The feature is uniform over all columns and the cut uniform over the
        node's valid grid slice, mirroring the tree prior's rule draw, so
        rule probabilities cancel from every acceptance ratio.
        """
        f = int(self.rng.integers(self.p))
        rng_info = self._valid_cut_range(node_rows, f)
        if rng_info is None:
            return None
        grid, start, stop = rng_info
        c = grid[self.rng.integers(start, stop)]
        return f, float(c)

    def _psplit(self, depth):
        return self.hyper.alpha * (1.0 + depth) ** (-self.hyper.beta)

    # -- per-tree sweep ------------------------------------------------------

    def update_tree(self, j, sigma2):
        tree = self.trees[j]
        pred_old = tree.mu[tree.leaf_tr]
        resid_j = self.resid + pred_old
        leaves = tree.live_leaves()
        if len(leaves) == 1:
            move = "grow"
        else:
            r = self.rng.uniform()
            move = ("grow" if r < _MOVE_PROBS["grow"]
                    else "prune" if r < _MOVE_PROBS["grow"] + _MOVE_PROBS["prune"]
                    else "change")
        self.propose_counts[move] += 1
        if move == "grow":
            accepted = self._grow(tree, leaves, resid_j, sigma2)
        elif move == "prune":
            accepted = self._prune(tree, resid_j, sigma2)
        else:
            accepted = self._change(tree, resid_j, sigma2)
        if accepted:
            self.accept_counts[move] += 1
            old_aff = self.aff[j]
            if old_aff.size:
                self.theta[old_aff] -= self.contrib[j]
            self.aff[j] = np.flatnonzero(tree.leaf_1 != tree.leaf_0)
            self.contrib[j] = np.zeros(self.aff[j].size)
        self._draw_leaf_values(tree, resid_j, sigma2)
        # fold updated predictions back into the maintained vectors
        self.resid = resid_j - tree.mu[tree.leaf_tr]
        aff = self.aff[j]
        if aff.size:
            new_contrib = tree.mu[tree.leaf_1[aff]] - tree.mu[tree.leaf_0[aff]]
            self.theta[aff] += new_contrib - self.contrib[j]
            self.contrib[j] = new_contrib

    def _grow(self, tree, leaves, resid_j, sigma2):
        node = leaves[self.rng.integers(len(leaves))]
        node_rows = np.flatnonzero(tree.leaf_tr == node)
        if node_rows.size < 2:
            return False
        rule = self._draw_rule(node_rows)
        if rule is None:
            return False
        f, c = rule
        go_left = self.X[node_rows, f] <= c
        nl = int(go_left.sum())
        nr = node_rows.size - nl
        r_node = resid_j[node_rows]
        s = r_node.sum()
        sl = r_node[go_left].sum()
        d = tree.depth[node]
        loglik = (
            self._leaf_loglik(nl, sl, sigma2)
            + self._leaf_loglik(nr, s - sl, sigma2)
            - self._leaf_loglik(node_rows.size, s, sigma2)
        )
        ps, ps_child = self._psplit(d), self._psplit(d + 1)
        log_prior = np.log(ps) + 2.0 * np.log1p(-ps_child) - np.log1p(-ps)
        p_grow = 1.0 if len(leaves) == 1 else _MOVE_PROBS["grow"]
        # apply tentatively so the reverse-move choice count is exact
        l, r = tree.add_children(node, f, c)
        n_nog_new = len(tree.nog_nodes())
        log_trans = np.log(_MOVE_PROBS["prune"] / n_nog_new) - np.log(
            p_grow / len(leaves)
        )
        if np.log(self.rng.uniform()) <= loglik + log_prior + log_trans:
            rows1 = np.flatnonzero(tree.leaf_1 == node)
            rows0 = np.flatnonzero(tree.leaf_0 == node)
            tree.leaf_tr[node_rows] = np.where(go_left, l, r)
            tree.leaf_1[rows1] = np.where(self.X1[rows1, f] <= c, l, r)
            tree.leaf_0[rows0] = np.where(self.X0[rows0, f] <= c, l, r)
            return True
        tree.drop_children(node)
        return False

    def _prune(self, tree, resid_j, sigma2):
        nogs = tree.nog_nodes()
        if not nogs:
            return False
        node = nogs[self.rng.integers(len(nogs))]
        l, r = tree.left[node], tree.right[node]
        in_l = tree.leaf_tr == l
        in_r = tree.leaf_tr == r
        sl, sr = resid_j[in_l].sum(), resid_j[in_r].sum()
        nl, nr = int(in_l.sum()), int(in_r.sum())
        loglik = (
            self._leaf_loglik(nl + nr, sl + sr, sigma2)
            - self._leaf_loglik(nl, sl, sigma2)
            - self._leaf_loglik(nr, sr, sigma2)
        )
        d = tree.depth[node]
        ps, ps_child = self._psplit(d), self._psplit(d + 1)
        log_prior = -(np.log(ps) + 2.0 * np.log1p(-ps_child) - np.log1p(-ps))
        n_leaves_after = len(tree.live_leaves()) - 1
        p_grow_after = 1.0 if n_leaves_after == 1 else _MOVE_PROBS["grow"]
        log_trans = np.log(p_grow_after / n_leaves_after) - np.log(
            _MOVE_PROBS["prune"] / len(nogs)
        )
        if np.log(self.rng.uniform()) <= loglik + log_prior + log_trans:
            tree.leaf_tr[in_l | in_r] = node
            for leaf_map in (tree.leaf_1, tree.leaf_0):
                leaf_map[(leaf_map == l) | (leaf_map == r)] = node
            tree.drop_children(node)
            return True
        return False

    def _change(self, tree, resid_j, sigma2):
        nogs = tree.nog_nodes()
        if not nogs:
            return False
        node = nogs[self.rng.integers(len(nogs))]
        l, r = tree.left[node], tree.right[node]
        rows = np.flatnonzero((tree.leaf_tr == l) | (tree.leaf_tr == r))
        rule = self._draw_rule(rows)
        if rule is None:
            return False
        f_new, c_new = rule
        go_left_new = self.X[rows, f_new] <= c_new
        nl_new = int(go_left_new.sum())
        r_rows = resid_j[rows]
        s = r_rows.sum()
        sl_new = r_rows[go_left_new].sum()
        old_left = tree.leaf_tr[rows] == l
        nl_old = int(old_left.sum())
        sl_old = r_rows[old_left].sum()
        loglik = (
            self._leaf_loglik(nl_new, sl_new, sigma2)
            + self._leaf_loglik(rows.size - nl_new, s - sl_new, sigma2)
            - self._leaf_loglik(nl_old, sl_old, sigma2)
            - self._leaf_loglik(rows.size - nl_old, s - sl_old, sigma2)
        )
        if np.log(self.rng.uniform()) <= loglik:
            tree.feature[node] = f_new
            tree.cut[node] = c_new
            tree.leaf_tr[rows] = np.where(go_left_new, l, r)
            for leaf_map, design in ((tree.leaf_1, self.X1), (tree.leaf_0, self.X0)):
                sel = np.flatnonzero((leaf_map == l) | (leaf_map == r))
                leaf_map[sel] = np.where(design[sel, f_new] <= c_new, l, r)
            return True
        return False

    def _draw_leaf_values(self, tree, resid_j, sigma2):
        v = self.sigma_mu**2
        node_count = len(tree.feature)
        counts = np.bincount(tree.leaf_tr, minlength=node_count).astype(float)
        sums = np.bincount(tree.leaf_tr, weights=resid_j, minlength=node_count)
        live = np.array(tree.live_leaves())
        n_l = counts[live]
        s_l = sums[live]
        post_var = sigma2 * v / (sigma2 + n_l * v)
        post_mean = v * s_l / (sigma2 + n_l * v)
        mu = np.zeros(node_count)
        mu[live] = post_mean + np.sqrt(post_var) * self.rng.standard_normal(live.size)
        tree.mu = mu

    def acceptance_rates(self):
        return {
            m: (self.accept_counts[m] / self.propose_counts[m]
                if self.propose_counts[m] else 0.0)
            for m in _MOVE_PROBS
        }


def _sigma_lambda(sigma_hat, nu, q):
    # lambda such that P(sigma < sigma_hat) = q under sigma^2 ~ nu lambda / chi2_nu
    return sigma_hat**2 * chi2.ppf(1.0 - q, nu) / nu


def fit(X_aug, A, Y, delta, hyper: BartHyperparams, seed: int,
        iteration_hook=None, keep_state=False) -> BartPosterior:
    """Run the Metropolis-within-Gibbs sampler; returns retained draws.

    `iteration_hook(it, z_std, lower_std, sigma2)` is called once per sweep
    (testing aid); `keep_state` attaches the final sampler state to the
    returned posterior as `_state`.
    """
    X_aug = np.asarray(X_aug, dtype=float)
    A = np.asarray(A, dtype=float)
    Y = np.asarray(Y, dtype=float)
    delta = np.asarray(delta).astype(bool)
    n = Y.size
    if (Y <= 0).any() or not np.isfinite(Y).all():
        raise BartError("follow-up times must be positive and finite")
    if not delta.any():
        raise BartError("no observed events")
    log_y = np.log(Y)
    if not np.isfinite(log_y).all():
        raise BartError("non-finite log follow-up time")

    # center/scale outcomes to [-0.5, 0.5] over the observed values
    lo, hi = log_y.min(), log_y.max()
    center = 0.5 * (lo + hi)
    scale = hi - lo if hi > lo else 1.0
    zy = (log_y - center) / scale

    design = np.column_stack([X_aug, A])
    design1 = np.column_stack([X_aug, np.ones(n)])
    design0 = np.column_stack([X_aug, np.zeros(n)])

    rng = default_rng(seed)
    sampler = _Sampler(design, design1, design0, hyper, rng)

    # residual-scale prior anchored at the OLS fit of the standardized outcome
    Zols = np.column_stack([np.ones(n), design])
    if n > Zols.shape[1]:
        resid_ols = zy - Zols @ np.linalg.lstsq(Zols, zy, rcond=None)[0]
        sigma_hat = max(resid_ols.std(ddof=min(n - 1, Zols.shape[1])), 1e-3)
    else:
        sigma_hat = max(zy.std(), 1e-3)
    lam = _sigma_lambda(sigma_hat, hyper.nu, hyper.q)
    sigma2 = sigma_hat**2

    z = zy.copy()
    censored = ~delta
    z[censored] = zy[censored] + sigma_hat / 2.0
    sampler.set_outcome(z)

    S = (hyper.iterations - hyper.burn_in + hyper.thin - 1) // hyper.thin
    theta_draws = np.empty((n, S))
    sigma_draws = np.empty(S)
    kept = 0
    for it in range(hyper.iterations):
        if censored.any():
            fit_cens = z[censored] - sampler.resid[censored]
            z_new = sample_truncated_normal(
                fit_cens, np.sqrt(sigma2), zy[censored], rng
            )
            sampler.resid[censored] += z_new - z[censored]
            z[censored] = z_new
        for j in range(hyper.num_trees):
            sampler.update_tree(j, sigma2)
        ssr = sampler.resid @ sampler.resid
        sigma2 = (hyper.nu * lam + ssr) / rng.chisquare(hyper.nu + n)
        if iteration_hook is not None:
            iteration_hook(it, z, zy, sigma2)
        if it >= hyper.burn_in and (it - hyper.burn_in) % hyper.thin == 0:
            theta_draws[:, kept] = sampler.theta * scale
            sigma_draws[kept] = np.sqrt(sigma2) * scale
            kept += 1
    posterior = BartPosterior(
        theta_draws=theta_draws[:, :kept],
        sigma_draws=sigma_draws[:kept],
        acceptance_stats=sampler.acceptance_rates(),
    )
    if keep_state:
        posterior._state = (sampler, z, zy, sigma2, scale)
    return posterior


def credible_interval(posterior: BartPosterior, level: float = 0.95) -> np.ndarray:
    """Per-individual equal-tailed interval from the retained draws."""
    draws = posterior.theta_draws
    if draws.shape[1] < 100:
        raise BartError("need at least 100 retained draws")
    tail = 0.5 * (1.0 - level)
    lo = np.quantile(draws, tail, axis=1)        # type-7 interpolation
    hi = np.quantile(draws, 1.0 - tail, axis=1)
    return np.column_stack([lo, hi])


def posterior_d_statistics(posterior: BartPosterior) -> np.ndarray:
    """Per-individual posterior probability of an above-average effect.

    The population average is recomputed within each draw; exact ties
    contribute one half, so a perfectly homogeneous posterior yields 0.5.
    """
    draws = posterior.theta_draws
    if draws.shape[1] < 100:
        raise BartError("need at least 100 retained draws")
    bar = draws.mean(axis=0, keepdims=True)
    return ((draws > bar) + 0.5 * (draws == bar)).mean(axis=1)


def null_flags_bart(posterior: BartPosterior, lo=0.025, hi=0.975) -> float:
    """Proportion of individuals with strong evidence of a non-average effect."""
    d = posterior_d_statistics(posterior)
    return float(((d <= lo) | (d >= hi)).mean())


def export_posterior(posterior: BartPosterior, path) -> None:
    """Binary dump: magic, n, S as little-endian int64, then row-major float64."""
    draws = np.ascontiguousarray(posterior.theta_draws, dtype="<f8")
    n, s = draws.shape
    with open(path, "wb") as fh:
        fh.write(_POSTERIOR_MAGIC)
        fh.write(struct.pack("<qq", n, s))
        fh.write(draws.tobytes())


def load_posterior_draws(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _POSTERIOR_MAGIC:
            raise BartError("not a posterior dump")
        n, s = struct.unpack("<qq", fh.read(16))
        data = np.frombuffer(fh.read(n * s * 8), dtype="<f8")
    return data.reshape(n, s)
