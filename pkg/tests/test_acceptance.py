"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale end-to-end criteria share one pipeline run (session fixture).
Criterion 7's reduction clauses are expected to fail on this synthetic
family: the national CV bound for the rare binary variable sits below the
information floor sqrt(p(1-p)/n)/p of ANY estimator once the sample shrinks,
so no honest posterior can pass the CV gate at alpha >= 0.5 (see the
analysis notes shipped with the run report). The criterion is asserted as
stated rather than weakened.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from scipy.integrate import trapezoid
from scipy.special import expit

import strataplan.pipeline as pl
from strataplan.allocation import PrecisionTargets, VarianceInputs, bethel_solve
from strataplan.hb import (
    AreaData,
    BinomialLogitModel,
    FayHerriotModel,
    gelman_rubin,
    mcse_mean,
)
from strataplan.popgen import PopulationConfig

DESK_SEED = 20260301
_RESULTS = []


def _criterion(number, label, passed, detail=""):
    line = f"ACCEPTANCE {number:>2} [{'PASS' if passed else 'FAIL'}] {label}"
    if detail:
        line += f" :: {detail}"
    print(line, flush=True)
    _RESULTS.append(line)
    assert passed, line


@pytest.fixture(scope="session", autouse=True)
def _summary_banner():
    yield
    print("\n=== acceptance summary ===")
    for line in _RESULTS:
        print(line)


def desk_config(n_jobs):
    cfg = pl.RunConfig()
    cfg.population = PopulationConfig(
        n_units=100_000, n_strata=50, n_domains=10, seed=DESK_SEED
    )
    cfg.seed = DESK_SEED
    cfg.mc = pl.MCSettings(replications=100, n_jobs=n_jobs)
    return cfg


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One full desk-scale pipeline run shared by criteria 3, 7 and 8."""
    outdir = tmp_path_factory.mktemp("desk")
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        manifest = pl.run_pipeline(desk_config(n_jobs=2), outdir)
    return outdir, manifest


def random_problem(rng, h, k, d, n_max=60):
    sizes = rng.integers(20, n_max + 1, h)
    domain_of = np.sort(rng.integers(0, d, h))
    domain_of[0] = 0
    variables = tuple(f"v{i}" for i in range(k))
    totals = {}
    s2 = {v: rng.uniform(0.5, 9.0, h) for v in variables}
    means = {v: rng.uniform(1.0, 4.0, h) for v in variables}
    for v in variables:
        y = np.empty(int(domain_of.max()) + 2)
        contrib = sizes * means[v]
        y[0] = contrib.sum()
        for dd in range(int(domain_of.max()) + 1):
            y[dd + 1] = contrib[domain_of == dd].sum()
        totals[v] = y
    inputs = VarianceInputs(
        variables=variables,
        stratum_sizes=sizes,
        domain_of=domain_of,
        s2=s2,
        deff={v: np.ones(h) for v in variables},
        anticipated_totals=totals,
        costs=np.ones(h),
        n_min=np.ones(h, dtype=np.int64),
    )
    targets = PrecisionTargets(
        national={v: float(rng.uniform(0.05, 0.15)) for v in variables},
        domain={v: float(rng.uniform(0.15, 0.40)) for v in variables},
    )
    return inputs, targets


def enumerate_minimum_cost(inputs, targets):
    """Vectorised exhaustive search over every integer allocation."""
    h = inputs.n_strata
    cells = [(v, d) for v in inputs.variables for d in range(inputs.n_domains + 1)]
    a = np.zeros((h, len(cells)))
    vbound = np.zeros(len(cells))
    big_n = inputs.stratum_sizes.astype(float)
    for j, (v, d) in enumerate(cells):
        mask = inputs.domain_mask(d)
        col = np.where(mask, inputs.deff[v] * big_n**2 * inputs.s2[v], 0.0)
        a[:, j] = col
        vbound[j] = (targets.bound(v, d) * inputs.anticipated_totals[v][d]) ** 2 + (
            col / big_n
        ).sum()
    axes = [np.arange(1, n + 1) for n in inputs.stratum_sizes]
    grids = np.meshgrid(*axes, indexing="ij")
    flat = [g.reshape(-1).astype(float) for g in grids]
    lhs = np.zeros((len(flat[0]), len(cells)))
    for i in range(h):
        lhs += a[i] / flat[i][:, None]
    feasible = np.all(lhs <= vbound * (1 + 1e-12), axis=1)
    costs = sum(flat)
    return float(costs[feasible].min())


class TestCriterion1:
    def test_bethel_matches_enumeration(self):
        rng = np.random.default_rng(101)
        start = time.time()
        worst_gap = 0
        for trial in range(50):
            h = int(rng.integers(2, 4))
            k = int(rng.integers(1, 3))
            d = int(rng.integers(1, 3))
            inputs, targets = random_problem(rng, h, k, d)
            sol = bethel_solve(inputs, targets)
            best = enumerate_minimum_cost(inputs, targets)
            gap = sol.cost - best
            worst_gap = max(worst_gap, gap)
            assert gap <= h + 1e-9, f"trial {trial}: cost {sol.cost} vs optimum {best}"
        elapsed = time.time() - start
        _criterion(
            1,
            "minimum-cost solver vs integer enumeration on 50 instances",
            worst_gap <= 3 and elapsed < 60,
            f"worst gap {worst_gap:.0f} units, {elapsed:.1f}s",
        )


class TestCriterion2:
    def test_single_variable_proportionality(self):
        rng = np.random.default_rng(202)
        start = time.time()
        worst = 0.0
        for _ in range(20):
            h = int(rng.integers(2, 9))
            sizes = rng.integers(300, 3000, h)
            s2 = {"y": rng.uniform(0.25, 16.0, h)}
            means = {"y": rng.uniform(1.0, 5.0, h)}
            totals = {"y": np.array([(sizes * means["y"]).sum(), (sizes * means["y"]).sum()])}
            inputs = VarianceInputs(
                variables=("y",),
                stratum_sizes=sizes,
                domain_of=np.zeros(h, dtype=int),
                s2=s2,
                deff={"y": np.ones(h)},
                anticipated_totals=totals,
                costs=np.ones(h),
                n_min=np.ones(h, dtype=np.int64),
            )
            targets = PrecisionTargets(
                national={"y": float(rng.uniform(0.01, 0.04))}, domain={"y": 0.9}
            )
            sol = bethel_solve(inputs, targets)
            weights = sizes * np.sqrt(s2["y"])
            interior = (sol.continuous > 1 + 1e-9) & (sol.continuous < sizes - 1e-9)
            got = sol.continuous[interior] / sol.continuous[interior].sum()
            want = weights[interior] / weights[interior].sum()
            worst = max(worst, float(np.max(np.abs(got / want - 1.0))))
        _criterion(
            2,
            "single-variable special case reproduces N_h*S_h proportions",
            worst <= 1e-6,
            f"worst relative deviation {worst:.2e}, {time.time()-start:.1f}s",
        )


class TestCriterion3:
    def test_desk_allocation_patterns(self, desk_run):
        outdir, _ = desk_run
        t1 = pd.read_csv(outdir / "t1_sample_sizes.csv").set_index("variable")
        with open(outdir / "allocation_totals.json") as fh:
            totals = json.load(fh)
        ordered = (
            t1.loc["hours", "neyman"]
            < t1.loc["employment", "neyman"]
            < t1.loc["unemployment", "neyman"]
        )
        nso_matches = totals["nso_max"] == totals["neyman"]["unemployment"]
        t2 = pd.read_csv(outdir / "t2_neyman_nso_cv.csv").set_index("variable")
        unemp = t2.loc["unemployment"]
        deficiency2 = (
            unemp["nso_worst_domain_cv"] > unemp["domain_target"]
            and unemp["nso_national_cv"] <= unemp["national_target"]
        )
        t3 = pd.read_csv(outdir / "t3_bethel_cv.csv")
        bethel_ok = bool(t3["all_pass"].all())
        passed = bool(ordered and nso_matches and deficiency2 and bethel_ok)
        _criterion(
            3,
            "desk-scale allocation patterns (totals order, max rule, CV table)",
            passed,
            f"neyman totals {t1['neyman'].to_dict()}, nso {totals['nso_max']}, "
            f"unemp worst domain CV {unemp['nso_worst_domain_cv']:.3f}",
        )


class TestCriterion4:
    def test_sampler_oracles(self):
        start = time.time()
        # (a) Gaussian model with pinned effect variance vs conjugate moments
        theta_hat = np.array([1.0, 2.5, -0.8])
        psi = np.array([0.5, 1.0, 0.25])
        s2 = 0.75
        data = AreaData(
            z=np.ones((3, 1)),
            weights=np.ones(3),
            domain_of=np.arange(3),
            direct=theta_hat,
            psi=psi,
        )
        model = FayHerriotModel(
            chains=4, iterations=3000, burn_in=500, seed=311, nu=1e10, s2=s2, tau2_beta=1e-12
        ).fit(data)
        prec = 1.0 / psi + 1.0 / s2
        ok_a = True
        for h in range(3):
            want = (theta_hat[h] / psi[h]) / prec[h]
            se = mcse_mean(model.draws_.area[:, :, h])
            ok_a &= abs(model.summary_.mean_of(("stratum", h)) - want) < 3 * se
            ok_a &= abs(model.summary_.sd_of(("stratum", h)) - math.sqrt(1 / prec[h])) < 3 * se

        # (b) intercept-only binomial vs 1-D quadrature
        y, n, tau2 = 17.0, 60.0, 1e6
        bdata = AreaData(
            z=np.ones((1, 1)),
            weights=np.ones(1),
            domain_of=np.zeros(1, dtype=int),
            successes=np.array([y]),
            trials=np.array([n]),
        )
        bmodel = BinomialLogitModel(
            chains=4, iterations=4000, burn_in=1000, seed=312, nu=1e8, s2=1e-12, tau2_beta=tau2
        ).fit(bdata)
        beta = np.linspace(-8.0, 6.0, 200001)
        log_post = y * beta - n * np.logaddexp(0.0, beta) - beta**2 / (2 * tau2)
        weight = np.exp(log_post - log_post.max())
        p = expit(beta)
        e_p = trapezoid(weight * p, beta) / trapezoid(weight, beta)
        e_p2 = trapezoid(weight * p * p, beta) / trapezoid(weight, beta)
        sd_p = math.sqrt(e_p2 - e_p**2)
        se = mcse_mean(bmodel.draws_.area[:, :, 0])
        got_mean = bmodel.summary_.mean_of(("stratum", 0))
        got_sd = bmodel.summary_.sd_of(("stratum", 0))
        ok_b = abs(got_mean - e_p) < 3 * se and abs(got_sd - sd_p) < 3 * se
        elapsed = time.time() - start
        _criterion(
            4,
            "MCMC samplers vs conjugate and quadrature oracles",
            bool(ok_a and ok_b and elapsed < 120),
            f"binomial mean {got_mean:.5f} vs {e_p:.5f}, {elapsed:.1f}s",
        )


class TestCriterion5:
    def test_diagnostic_anchors(self):
        chains = np.array([[1.0, 2.0, 3.0, 4.0], [3.0, 4.0, 5.0, 6.0]])
        w = 5.0 / 3.0
        b = 8.0
        expected = math.sqrt((0.75 * w + b / 4.0) / w)
        exact = abs(gelman_rubin(chains) - expected) < 1e-12
        rng = np.random.default_rng(505)
        inside = sum(
            0.99 <= gelman_rubin(rng.standard_normal((2, 1000))) <= 1.01
            for _ in range(100)
        )
        _criterion(
            5,
            "convergence diagnostic hand anchor and iid-normal behaviour",
            bool(exact and inside >= 95),
            f"hand value matched to 1e-12, {inside}/100 in [0.99, 1.01]",
        )


class TestCriterion6:
    def test_calibration_under_true_model(self):
        start = time.time()
        rng = np.random.default_rng(606)
        h = 15
        z = np.column_stack([np.ones(h), rng.normal(0.0, 1.0, h)])
        beta_true = np.array([-1.0, 0.3])
        sigma2_true = 0.25
        trials = np.full(h, 80.0)
        covered = total = 0
        for dataset in range(500):
            v = rng.normal(0.0, math.sqrt(sigma2_true), h)
            p = expit(z @ beta_true + v)
            y = rng.binomial(trials.astype(int), p).astype(float)
            data = AreaData(
                z=z,
                weights=np.ones(h),
                domain_of=np.zeros(h, dtype=int),
                successes=y,
                trials=trials,
            )
            model = BinomialLogitModel(
                chains=2,
                iterations=800,
                burn_in=400,
                seed=dataset,
                nu=6.0,
                s2=sigma2_true,
            ).fit(data)
            for i in range(h):
                lo, hi = model.summary_.ci_of(("stratum", i))
                covered += lo <= p[i] <= hi
                total += 1
        rate = covered / total
        elapsed = time.time() - start
        _criterion(
            6,
            "credible interval coverage under the true generating model",
            bool(0.92 <= rate <= 0.98 and elapsed < 600),
            f"coverage {rate:.3f} over {total} intervals, {elapsed:.0f}s",
        )


class TestCriterion7:
    def test_desk_reduction_and_cv_pass(self, desk_run):
        outdir, _ = desk_run
        with open(outdir / "reduction.json") as fh:
            red = json.load(fh)
        t4 = pd.read_csv(outdir / "t4_hb_cv.csv")
        mc = pd.read_csv(outdir / "mc_summary.csv").set_index("variable")
        alpha_ok = red["alpha_star"] >= 0.5
        cv_ok = bool(t4["all_pass"].all())
        rate_ok = bool((mc["cv_pass_rate"] >= 0.90).all())
        _criterion(
            7,
            "desk-scale search yields alpha* >= 0.5 with all CV gates passing",
            bool(alpha_ok and cv_ok and rate_ok),
            f"alpha*={red['alpha_star']} per-variable="
            f"{ {v: d['alpha_star'] for v, d in red['per_variable'].items()} } "
            f"cv_pass_rates={mc['cv_pass_rate'].round(2).to_dict()} "
            "(national CV for the ~1.8% binary sits below the information floor at "
            "every alpha; see the decisions notes)",
        )


class TestCriterion8:
    def test_mc_accuracy_patterns(self, desk_run):
        outdir, _ = desk_run
        mc = pd.read_csv(outdir / "mc_summary.csv").set_index("variable")
        bias_ok = bool((mc["national_bias_mean"].abs() <= 0.02).all())
        unemp_worst = (
            mc.loc["unemployment", "domain_max_are_mean"]
            == mc["domain_max_are_mean"].max()
        )
        _criterion(
            8,
            "MC national bias within 2% and rare variable worst on max ARE",
            bool(bias_ok and unemp_worst),
            f"biases={mc['national_bias_mean'].round(4).to_dict()}, "
            f"max ARE={mc['domain_max_are_mean'].round(3).to_dict()}",
        )


class TestCriterion9:
    def test_rerun_is_byte_identical_across_parallelism(self, desk_run, tmp_path_factory):
        outdir, _ = desk_run
        rerun_dir = tmp_path_factory.mktemp("desk-rerun")
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pl.run_pipeline(desk_config(n_jobs=1), rerun_dir)
        tables = [f"t{i}_" for i in range(1, 9)]
        identical = []
        for path in sorted(Path(outdir).glob("t*.csv")):
            twin = rerun_dir / path.name
            identical.append(path.read_bytes() == twin.read_bytes())
        _criterion(
            9,
            "same seed reruns are byte-identical regardless of parallelism",
            bool(identical and all(identical)),
            f"{sum(identical)}/{len(identical)} table files identical",
        )


@pytest.mark.slow
@pytest.mark.skipif(
    os.environ.get("STRATAPLAN_RUN_SLOW") != "1",
    reason="full-scale overnight check; set STRATAPLAN_RUN_SLOW=1 to run",
)
class TestCriterion10:
    def test_full_scale_pattern(self, tmp_path_factory):
        outdir = tmp_path_factory.mktemp("fullscale")
        cfg = pl.RunConfig()
        cfg.population = PopulationConfig(
            n_units=1_000_000, n_strata=100, n_domains=10, seed=DESK_SEED
        )
        cfg.seed = DESK_SEED
        cfg.mc = pl.MCSettings(replications=100, n_jobs=4)
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pl.run_pipeline(cfg, outdir)
        with open(outdir / "allocation_totals.json") as fh:
            totals = json.load(fh)
        with open(outdir / "reduction.json") as fh:
            red = json.load(fh)
        bethel_ok = 70_000 <= totals["bethel"] <= 120_000
        reduction_ok = red["alpha_star"] >= 0.70 and red["recheck_pass"]
        _criterion(
            10,
            "full-scale pattern run (overnight)",
            bool(bethel_ok and reduction_ok),
            f"bethel={totals['bethel']}, alpha*={red['alpha_star']}",
        )
