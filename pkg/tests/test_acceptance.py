"""End-to-end acceptance gates for the simulation laboratory.

Each test prints one [PASS]/[FAIL] line per criterion.  The heavyweight
Monte-Carlo suites (Hu, Henderson, null-effect) run once per session via
module fixtures at desk scale: 10 replications, n=500 for sampler-heavy
suites, n=1000 data-only checks.
"""

import time

import numpy as np
import pytest

from itecover import bart, csf, dgp, harness, metrics


def report(name, ok, detail=""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


SEED_BASE = 20260823


def run_suite(tmp, specs, estimators, variants, reps, n, bart_over=None,
              csf_over=None):
    lines = [
        f"reps = {reps}",
        f"n = {n}",
        f"seed_base = {SEED_BASE}",
        f"output_dir = {tmp / 'out'}",
        f"estimators = {','.join(estimators)}",
        f"hyper_variants = {','.join(variants)}",
    ]
    if bart_over:
        lines.append("[bart]")
        lines += [f"{k} = {v}" for k, v in bart_over.items()]
    if csf_over:
        lines.append("[csf]")
        lines += [f"{k} = {v}" for k, v in csf_over.items()]
    for fam, d, null in specs:
        lines += ["[spec]", f"family = {fam}", f"dgp = {d}",
                  f"null = {str(null).lower()}"]
    tmp.mkdir(parents=True, exist_ok=True)
    path = tmp / "config.txt"
    path.write_text("\n".join(lines) + "\n")
    config = harness.parse_config(path)
    rows = harness.run(config, profile="desk")
    harness.aggregate(tmp / "out" / "results.csv", tmp / "out" / "aggregate.csv")
    return rows


def mean_metric(rows, metric, **filters):
    vals = [
        row[metric]
        for row in rows
        if all(row[k] == v for k, v in filters.items())
    ]
    assert vals, f"no rows matching {filters}"
    return float(np.mean(vals))


@pytest.fixture(scope="module")
def hu_suite(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("hu")
    specs = [("hu", d, False) for d in (1, 2, 3, 4)]
    rows = run_suite(tmp / "bart", specs, ["bart"], ["improved"],
                     reps=10, n=500)
    rows += run_suite(tmp / "csf", specs, ["csf"], ["default"],
                      reps=10, n=500)
    return rows


@pytest.fixture(scope="module")
def henderson_suite(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("henderson")
    specs = [("henderson", d, False) for d in (1, 2, 3, 4)]
    rows = run_suite(tmp / "bart", specs, ["bart"], ["default"],
                     reps=10, n=500)
    rows += run_suite(tmp / "csf", specs, ["csf"], ["default"],
                      reps=10, n=500)
    return rows


@pytest.fixture(scope="module")
def null_suite(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("null")
    specs = [("henderson", 1, True), ("cui", 1, True), ("cui", 2, True),
             ("hu", 1, True)]
    # longer chains stabilize the tail posterior probabilities the
    # heterogeneity flags are read from
    rows = run_suite(tmp / "bart", specs, ["bart"], ["improved"],
                     reps=5, n=500,
                     bart_over={"iterations": 2500, "burn_in": 500})
    rows += run_suite(tmp / "csf", specs, ["csf"], ["improved"],
                      reps=5, n=500)
    return rows


class TestTruthOracles:
    def test_analytic_matches_monte_carlo(self):
        t0 = time.time()
        cases = (
            [("cui", 1, 4), ("cui", 2, 4)]
            + [("hu", d, 3) for d in (1, 2, 3, 4)]
        )
        worst = 0.0
        checked = 0
        for fam, d, n_probe in cases:
            spec = dgp.DgpSpec(family=fam, dgp_index=d, n=n_probe,
                               seed=harness.stable_hash("probe", fam, d) % 2**31)
            probe = dgp.generate_dataset(spec).X
            analytic = dgp.theta_true(spec, probe)
            for i in range(n_probe):
                mc, se = dgp.true_theta_oracle(
                    spec, probe[i], n_mc=10**6,
                    seed=harness.stable_hash("oracle", fam, d, i) % 2**31)
                z = abs(analytic[i] - mc) / se
                worst = max(worst, z)
                checked += 1
        elapsed = time.time() - t0
        report(
            "truth oracles (analytic vs 1e6-draw Monte-Carlo)",
            worst < 3.0 and checked == 20 and elapsed < 120,
            f"max |z| = {worst:.2f} over {checked} probes in {elapsed:.0f}s",
        )


class TestCensoring:
    def test_hu_censoring_band(self, hu_suite):
        rate = mean_metric(hu_suite, "censor_rate", estimator="bart")
        report("Hu pipeline censoring rate 0.20 +/- 0.04",
               0.16 <= rate <= 0.24, f"mean rate {rate:.3f}")

    def test_henderson_censoring_band(self, henderson_suite):
        rate = mean_metric(henderson_suite, "censor_rate", estimator="bart")
        report("Henderson censoring rate in [0.08, 0.25]",
               0.08 <= rate <= 0.25, f"mean rate {rate:.3f}")

    def test_cui_caps_exact(self):
        ok, detail = True, []
        for d in (1, 2, 3, 4):
            for rep in range(2):
                spec = dgp.DgpSpec(
                    family="cui", dgp_index=d, n=1000,
                    seed=harness.replication_seed(SEED_BASE, "cui", d, rep))
                ds = dgp.generate_dataset(spec)
                ok &= bool((ds.Y <= spec.cap).all())
                detail.append(f"dgp{d} max Y {ds.Y.max():.3f} cap {spec.cap}")
        report("Cui administrative caps respected exactly", ok,
               "; ".join(detail[:4]))


class TestCoverageOrdering:
    def test_hu_bart_dominates_csf(self, hu_suite):
        details, ok = [], True
        for d in (1, 2, 3, 4):
            b = mean_metric(hu_suite, "coverage", estimator="bart", dgp=d)
            c = mean_metric(hu_suite, "coverage", estimator="csf", dgp=d)
            ok &= 0.88 <= b <= 1.0 and 0.45 <= c <= 0.93 and b > c
            details.append(f"DGP{d}: bart {b:.3f} > csf {c:.3f}")
        report("Hu coverage ordering (BART improved vs CSF)", ok,
               "; ".join(details))


class TestHendersonCoverage:
    def test_bands(self, henderson_suite):
        b = mean_metric(henderson_suite, "coverage", estimator="bart")
        c = mean_metric(henderson_suite, "coverage", estimator="csf")
        report("Henderson coverage (BART >= 0.85, CSF <= 0.80)",
               b >= 0.85 and c <= 0.80,
               f"bart {b:.3f}, csf {c:.3f}")


class TestNullHte:
    def test_flag_proportions(self, null_suite):
        fams = [("henderson", 1), ("cui", 1), ("cui", 2), ("hu", 1)]
        details, ok = [], True
        cui_hits = 0
        for fam, d in fams:
            b = mean_metric(null_suite, "null_flag_prop",
                            estimator="bart", family=fam, dgp=d)
            c = mean_metric(null_suite, "null_flag_prop",
                            estimator="csf", family=fam, dgp=d)
            ok &= b <= 0.005 and c >= b
            if fam == "cui" and c >= 0.01:
                cui_hits += 1
            details.append(f"{fam}{d}: bart {b:.4f}, csf {c:.4f}")
        ok &= cui_hits >= 1
        report("null-effect false-heterogeneity flags", ok,
               "; ".join(details))


class TestBartCorrectness:
    def test_properties(self):
        draws = bart.sample_truncated_normal(np.zeros(10**6), 1.0, 0.0, 42)
        trunc_ok = abs(draws.mean() - np.sqrt(2 / np.pi)) < 0.003

        rng = np.random.default_rng(50)
        n = 150
        X = rng.uniform(size=(n, 2))
        A = (rng.uniform(size=n) < 0.5).astype(float)
        Y = np.exp(rng.normal(size=n) + 0.4 * A)
        delta = rng.uniform(size=n) < 0.7
        delta[0] = True
        hyper = bart.BartHyperparams(num_trees=40, iterations=150, burn_in=100)

        bounds_ok = []
        def hook(it, z, lower, sigma2):
            cens = ~delta
            bounds_ok.append((z[cens] > lower[cens]).all())

        post1 = bart.fit(X, A, Y, delta, hyper, seed=51, keep_state=True,
                         iteration_hook=hook)
        sampler, z, _, _, scale = post1._state
        identity_ok = np.allclose(
            sampler.resid, z - sampler.ensemble_pred("tr"), atol=1e-9
        )
        post2 = bart.fit(X, A, Y, delta, hyper, seed=51)
        determinism_ok = np.array_equal(post1.theta_draws, post2.theta_draws)

        # leaf full conditional on a one-leaf tree
        s2 = bart._Sampler(X, X, X, hyper, np.random.default_rng(52))
        tree = s2.trees[0]
        resid = np.random.default_rng(53).normal(0.4, 0.1, n)
        sigma2 = 0.05
        v = s2.sigma_mu**2
        post_mean = v * resid.sum() / (sigma2 + n * v)
        post_sd = np.sqrt(sigma2 * v / (sigma2 + n * v))
        mus = np.empty(10**5)
        for i in range(mus.size):
            s2._draw_leaf_values(tree, resid, sigma2)
            mus[i] = tree.mu[0]
        leaf_ok = (abs(mus.mean() - post_mean) < 0.01 * abs(post_mean)
                   and abs(mus.std() - post_sd) < 0.01 * post_sd)

        # sigma full conditional with the tree ensemble frozen at zero
        nu, lam, ssr, m = 3.0, 0.01, 4.0, 200
        sdraws = (nu * lam + ssr) / np.random.default_rng(54).chisquare(
            nu + m, size=10**5)
        sigma_ok = abs(sdraws.mean() - (nu * lam + ssr) / (nu + m - 2)) \
            < 0.01 * (nu * lam + ssr) / (nu + m - 2)

        report(
            "BART correctness properties",
            trunc_ok and all(bounds_ok) and identity_ok and determinism_ok
            and leaf_ok and sigma_ok,
            f"truncnorm {trunc_ok}, imputation bounds {all(bounds_ok)}, "
            f"sum-of-trees {identity_ok}, determinism {determinism_ok}, "
            f"leaf conditional {leaf_ok}, sigma conditional {sigma_ok}",
        )


class TestCsfCorrectness:
    def test_properties(self):
        rng = np.random.default_rng(60)

        # honesty: leaf values are a function of estimation-half outcomes only
        n = 600
        X = rng.uniform(size=(n, 3))
        gamma = X[:, 0] + rng.normal(0, 0.3, n)
        hyper = csf.CsfHyperparams(num_trees=100, bag_size=50)
        forest = csf.grow_forest(X, gamma, hyper, seed=61)
        honesty_ok = True
        for tree in forest.trees[:25]:
            j2 = np.concatenate(
                [tree.leaf_rows[k]
                 for k in np.flatnonzero(tree.feature == -1)])
            perturbed = gamma.copy()
            mask = np.ones(n, dtype=bool)
            mask[j2] = False
            perturbed[mask] += rng.normal(0, 5.0, mask.sum())
            for k in np.flatnonzero(tree.feature == -1):
                rows = tree.leaf_rows[k]
                if rows.size:
                    # summation order differs from the grower's, so allow ulp noise
                    honesty_ok &= bool(np.isclose(
                        tree.value[k], perturbed[rows].mean(), rtol=1e-12,
                        atol=0.0))

        # AIPW unbiasedness on randomized uncensored data
        m = 10**5
        Xa = rng.uniform(size=(m, 2))
        A = (rng.uniform(size=m) < 0.5).astype(float)
        tau = 0.5 + Xa[:, 0]
        log_t = 1.0 + Xa[:, 1] + tau * A + rng.normal(0, 0.4, m)

        class D:
            pass

        data = D()
        data.X, data.A, data.Y, data.delta = Xa, A, np.exp(log_t), np.ones(m)
        nuis = csf.NuisanceSet(
            ehat=np.full(m, 0.5), s_c=np.ones(m), mhat0=np.zeros(m),
            mhat1=np.zeros(m), horizon=1e12)
        g = csf.compute_pseudo_outcomes(data, nuis)
        aipw_z = abs(g.mean() - tau.mean()) / (g.std() / np.sqrt(m))
        aipw_ok = aipw_z < 3.0

        # censoring survival forest vs analytic exponential curve
        nc, rate = 3000, 0.2
        Xc = rng.uniform(size=(nc, 3))
        T = rng.exponential(10.0, size=nc)
        C = rng.exponential(1.0 / rate, size=nc)
        Yc = np.minimum(T, C)
        deltac = T <= C
        cf = csf.fit_censoring_survival(Xc, Yc, deltac, seed=62)
        sc_ok = True
        for t in np.quantile(Yc, np.linspace(0.05, 0.9, 8)):
            est = cf.evaluate(Xc[:200], np.full(200, t)).mean()
            sc_ok &= abs(est - np.exp(-rate * t)) < 0.05

        # min_node_size respected in every multi-leaf tree
        node_ok = True
        for tree in forest.trees:
            leaves = np.flatnonzero(tree.feature == -1)
            if leaves.size > 1:
                for k in leaves:
                    node_ok &= tree.leaf_rows[k].size >= hyper.min_node_size

        report(
            "CSF correctness properties",
            honesty_ok and aipw_ok and sc_ok and node_ok,
            f"honesty {honesty_ok}, AIPW z={aipw_z:.2f}, "
            f"censoring curve {sc_ok}, min_node_size {node_ok}",
        )


class TestMetricsFixtures:
    def test_examples_and_properties(self):
        fixtures_ok = True
        theta = np.linspace(-1, 1, 20)
        fixtures_ok &= metrics.bias_rmse(theta, theta) == (0.0, 0.0)
        b, r = metrics.bias_rmse(theta + 0.3, theta)
        fixtures_ok &= abs(b - 0.3) < 1e-12 and abs(r - 0.3) < 1e-12
        fixtures_ok &= metrics.misclass_csf(
            np.array([-0.1]), np.array([0.2])) == 1.0
        fixtures_ok &= metrics.hosmer_lemeshow(
            np.linspace(0, 1, 100), np.linspace(0, 1, 100)) == 0.0
        iv = np.array([[0.0, 1.0], [0.0, 1.0]])
        fixtures_ok &= metrics.coverage(iv, np.array([0.5, 1.0])) == 1.0
        hat = np.repeat(np.array([-5.0, -2.0, -1.0, 1.0, 2.0]), 30)
        draws = np.repeat(hat[:, None], 150, axis=1)
        truth = np.ones(150)
        fixtures_ok &= metrics.misclass_bart(draws, truth) == \
            metrics.misclass_csf(hat, truth)

        rng = np.random.default_rng(70)
        prop_ok = True
        for _ in range(1000):
            k = int(rng.integers(1, 40))
            h, t = rng.normal(size=k), rng.normal(size=k)
            b, r = metrics.bias_rmse(h, t)
            prop_ok &= r >= abs(b) - 1e-12
            lo = rng.normal(size=k)
            hi = lo + rng.uniform(0, 2, size=k)
            w = rng.uniform(0, 1, size=k)
            prop_ok &= metrics.coverage(
                np.column_stack([lo - w, hi + w]), t
            ) >= metrics.coverage(np.column_stack([lo, hi]), t)

        report("metrics fixtures and 1000-case properties",
               fixtures_ok and prop_ok,
               f"fixtures {fixtures_ok}, properties {prop_ok}")


class TestHarnessContracts:
    def test_determinism_and_counting(self, tmp_path):
        text = (
            "reps = 2\nn = 100\nseed_base = 3\noutput_dir = {out}\n"
            "estimators = bart,csf\nhyper_variants = default\n"
            "[bart]\niterations = 200\nburn_in = 100\nnum_trees = 30\n"
            "[csf]\nnum_trees = 100\n"
            "[spec]\nfamily = hu\ndgp = 1\n"
        )
        outs = []
        for tag, workers in (("a", 1), ("b", 1), ("c", 2)):
            cfg = tmp_path / f"cfg_{tag}.txt"
            cfg.write_text(text.format(out=tmp_path / tag))
            config = harness.parse_config(cfg)
            rows = harness.run(config, profile="desk", workers=workers)
            outs.append((tmp_path / tag / "results.csv").read_bytes())
        count_ok = len(rows) == 4  # 2 reps x 1 spec x 2 estimators x 1 variant
        rerun_ok = outs[0] == outs[1]
        worker_ok = outs[0] == outs[2]
        report(
            "harness determinism and counting",
            count_ok and rerun_ok and worker_ok,
            f"rows=4 {count_ok}, rerun identical {rerun_ok}, "
            f"worker-invariant {worker_ok}",
        )


class TestPlotsSecondary:
    def test_reference_line_points_and_snapshot(self, tmp_path):
        import matplotlib.pyplot as plt
        import pandas as pd

        from itecover import plotting

        rng = np.random.default_rng(80)
        rows = []
        for d in (1, 2, 3, 4):
            for e in ("bart", "csf"):
                for v in ("default", "improved"):
                    row = dict(family="hu", dgp=d, estimator=e, variant=v,
                               reps_used=10)
                    for mname in plotting.DEFAULT_METRICS:
                        row[f"mean_{mname}"] = float(rng.uniform())
                        row[f"se_{mname}"] = float(rng.uniform(0, 0.05))
                    rows.append(row)
        frame = pd.DataFrame(rows)
        path = tmp_path / "aggregate.csv"
        frame.to_csv(path, index=False)

        fig, ax = plt.subplots()
        plotting._plot_panel(ax, frame, "coverage")
        points = sum(len(c[0].get_xdata()) for c in ax.containers)
        line_ok = any(
            len(set(ln.get_ydata())) == 1 and ln.get_ydata()[0] == 0.95
            for ln in ax.lines
        )
        plt.close(fig)

        s1 = plotting.FigureSpec(input_path=path, output_dir=tmp_path / "f1",
                                 metrics=["coverage"])
        s2 = plotting.FigureSpec(input_path=path, output_dir=tmp_path / "f2",
                                 metrics=["coverage"])
        (a,) = plotting.render(s1)
        (b,) = plotting.render(s2)
        snap_ok = a.read_bytes() == b.read_bytes()
        report(
            "plots: reference line, point count, snapshot (secondary)",
            points == 16 and line_ok and snap_ok,
            f"points {points}, 0.95 line {line_ok}, snapshot {snap_ok}",
        )
