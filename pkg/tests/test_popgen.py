import math

import numpy as np
import pytest
from scipy.special import logit
from scipy.stats import truncnorm

from strataplan._util import derive_stream
from strataplan.popgen import (
    PopulationConfig,
    assign_domains,
    gen_covariates,
    gen_design_effects,
    gen_hours,
    gen_stratum_sizes,
    load_population,
    resolve_overlap,
    save_population,
    stratum_binary_prob,
    stratum_employment_prob,
    stratum_unemployment_prob,
    synthesize,
    truncated_normal_mean,
    VARIABLES,
)


def rng(*path):
    return derive_stream(918273, *path)


class TestDesignEffects:
    def test_degenerate_interval_gives_constant(self):
        cfg = PopulationConfig(n_units=100, n_strata=10, n_domains=2, deff_range=(1.0, 1.0))
        deff = gen_design_effects(cfg, rng("deff"))
        assert np.all(deff == 1.0)

    def test_range_and_mean(self):
        cfg = PopulationConfig(n_units=1000, n_strata=100, n_domains=10, deff_range=(1.1, 1.2))
        deff = gen_design_effects(cfg, rng("deff2"))
        assert np.all((deff >= 1.1) & (deff <= 1.2))
        se = (0.1 / math.sqrt(12)) / math.sqrt(100)
        assert abs(deff.mean() - 1.15) < 3 * se

    def test_same_seed_identical(self):
        cfg = PopulationConfig(n_units=1000, n_strata=100, n_domains=10)
        a = gen_design_effects(cfg, rng("x"))
        b = gen_design_effects(cfg, rng("x"))
        assert np.array_equal(a, b)


class TestCovariates:
    def test_zero_noise_copies_stratum_values(self):
        cfg = PopulationConfig(n_units=100, n_strata=5, n_domains=1, unit_noise_sd=0.0)
        sizes = np.array([20] * 5)
        strat, units = gen_covariates(cfg, "employment", sizes, rng("c1"), rng("c2"))
        assert np.array_equal(units, np.repeat(strat, sizes, axis=0))

    def test_stratum_draw_mean_matches_config(self):
        h = 10_000
        cfg = PopulationConfig(n_units=h, n_strata=h, n_domains=10)
        sizes = np.ones(h, dtype=int)
        strat, _ = gen_covariates(cfg, "employment", sizes, rng("c3"), rng("c4"))
        assert abs(strat[:, 0].mean() - 3.0) < 3.0 / math.sqrt(h)

    def test_independent_streams_uncorrelated(self):
        h = 1000
        cfg = PopulationConfig(n_units=h, n_strata=h, n_domains=10)
        sizes = np.ones(h, dtype=int)
        emp, _ = gen_covariates(cfg, "employment", sizes, rng("emp"), rng("emp-n"))
        unemp, _ = gen_covariates(cfg, "unemployment", sizes, rng("unemp"), rng("unemp-n"))
        corr = np.corrcoef(emp[:, 0], unemp[:, 0])[0, 1]
        assert abs(corr) < 0.1


class TestLatentProbabilities:
    def test_centred_covariates_recover_intercept_rate(self):
        cfg = PopulationConfig()
        assert stratum_employment_prob(3.0, 4.0, 0.0, 0.0, cfg) == pytest.approx(0.62)
        assert stratum_unemployment_prob(3.0, 4.0, 0.0, 0.0, cfg) == pytest.approx(0.04)

    def test_coefficient_moves_logit_by_one(self):
        cfg = PopulationConfig()
        base = stratum_employment_prob(3.0, 4.0, 0.0, 0.0, cfg)
        moved = stratum_employment_prob(3.0 + 1 / 0.15, 4.0, 0.0, 0.0, cfg)
        assert logit(moved) - logit(base) == pytest.approx(1.0, abs=1e-12)

    def test_logistic_monotone_in_covariate(self):
        cfg = PopulationConfig()
        lo = stratum_unemployment_prob(3.0, 4.0, 0.0, 0.0, cfg)
        hi = stratum_unemployment_prob(4.0, 4.0, 0.0, 0.0, cfg)
        assert hi > lo

    def test_national_latent_rates_near_nominal(self):
        # pre-resolution means over many simulated strata stay near the
        # configured rates (the logit-normal mean shift is second order)
        cfg = PopulationConfig()
        g = rng("latent")
        for variable, rate, tol in [("employment", 0.62, 0.01), ("unemployment", 0.04, 0.005)]:
            params = cfg.variable_params(variable)
            h = 4000
            x1 = g.normal(*params.cov1, h)
            x2 = g.normal(*params.cov2, h)
            gamma = g.normal(0, params.domain_sd, h)
            eps = g.normal(0, params.stratum_sd, h)
            p = stratum_binary_prob(x1, x2, gamma, eps, params)
            assert abs(p.mean() - rate) < tol


class TestResolveOverlap:
    def test_no_overlap_is_identity(self):
        e = np.array([1, 0, 1, 0], dtype=np.int8)
        u = np.array([0, 1, 0, 0], dtype=np.int8)
        e2, u2 = resolve_overlap(e, u, rng("r0"))
        assert np.array_equal(e, e2) and np.array_equal(u, u2)

    def test_split_ratio(self):
        n = 66_000
        e = np.ones(n, dtype=np.int8)
        u = np.ones(n, dtype=np.int8)
        e2, u2 = resolve_overlap(e, u, rng("r1"))
        expected = n * 62 / 66
        se = math.sqrt(n * (62 / 66) * (4 / 66))
        assert abs(e2.sum() - expected) < 3 * se
        assert np.array_equal(e2 + u2, np.ones(n, dtype=np.int8))

    def test_no_joint_ones_after_resolution(self, small_pop):
        pop, _ = small_pop
        assert int(((pop.employment == 1) & (pop.unemployment == 1)).sum()) == 0


class TestHours:
    def test_zero_covariates_centre_the_link(self):
        cfg = PopulationConfig()
        _, mu = gen_hours(cfg, np.zeros((3, 2)), np.array([1, 1, 1]), rng("h0"))
        assert np.allclose(mu, 15 + 45 * 0.5)

    def test_truncation_bounds_hold(self, small_pop):
        pop, _ = small_pop
        lo, hi = pop.config.hours.truncation
        assert pop.hours.min() >= lo and pop.hours.max() <= hi

    def test_sample_mean_matches_analytic_truncated_mean(self):
        cfg = PopulationConfig()
        n = 100_000
        draws, mu = gen_hours(cfg, np.zeros((1, 2)), np.array([n]), rng("h1"))
        a, b = (15 - 37.5) / 12, (60 - 37.5) / 12
        expected = truncated_normal_mean(37.5, 12.0, 15.0, 60.0)
        assert expected == pytest.approx(truncnorm.mean(a, b, loc=37.5, scale=12.0))
        sd = truncnorm.std(a, b, loc=37.5, scale=12.0)
        assert abs(draws.mean() - expected) < 3 * sd / math.sqrt(n)


class TestStructure:
    def test_stratum_sizes_partition_population(self):
        cfg = PopulationConfig(n_units=12_345, n_strata=17, n_domains=4)
        sizes = gen_stratum_sizes(cfg, rng("s"))
        assert sizes.sum() == 12_345 and sizes.min() >= 1

    def test_balanced_domain_blocks(self):
        domains = assign_domains(10, 4)
        counts = np.bincount(domains)
        assert counts.sum() == 10 and counts.max() - counts.min() <= 1
        assert len(counts) == 4
        # contiguity: nondecreasing labels
        assert np.all(np.diff(domains) >= 0)

    def test_one_unit_per_stratum_runs(self):
        cfg = PopulationConfig(n_units=20, n_strata=20, n_domains=4, seed=5)
        pop, truth = synthesize(cfg)
        for var in VARIABLES:
            per_unit = pop.values(var).astype(float)
            assert np.allclose(truth.stratum_means[var], per_unit)

    def test_truth_aggregation_identity(self, small_pop):
        pop, truth = small_pop
        for var in VARIABLES:
            domain_sum = math.fsum(truth.domain_totals[var])
            assert domain_sum == truth.national_totals[var]
            for d in range(truth.n_domains):
                strata = pop.strata.domain_strata(d + 1)
                assert math.fsum(truth.stratum_totals[var][strata]) == truth.domain_totals[var][d]

    def test_config_invariants_enforced(self):
        with pytest.raises(ValueError, match="n_units"):
            PopulationConfig(n_units=5, n_strata=10, n_domains=2).validate()
        with pytest.raises(ValueError, match="deff_range"):
            PopulationConfig(deff_range=(0.9, 1.2)).validate()
        with pytest.raises(ValueError, match="rate"):
            PopulationConfig(
                employment=PopulationConfig().employment.__class__(
                    1.5, 0.1, 0.1, 0.1, 0.1, (3, 1), (4, 1)
                )
            ).validate()
        with pytest.raises(ValueError, match="truncation"):
            cfg = PopulationConfig()
            PopulationConfig(
                hours=cfg.hours.__class__(0.1, 0.1, 12.0, (60.0, 15.0), 15.0, 45.0, (0, 3), (0, 3))
            ).validate()


class TestDeterminismAndRoundTrip:
    def test_same_seed_same_population(self):
        cfg = PopulationConfig(n_units=2_000, n_strata=8, n_domains=2, seed=99)
        pop1, _ = synthesize(cfg)
        pop2, _ = synthesize(cfg)
        assert np.array_equal(pop1.employment, pop2.employment)
        assert np.array_equal(pop1.hours, pop2.hours)
        assert np.array_equal(pop1.covariates["hours"], pop2.covariates["hours"])

    def test_export_is_byte_identical_across_runs(self, tmp_path):
        cfg = PopulationConfig(n_units=1_000, n_strata=5, n_domains=2, seed=3)
        blobs = []
        for run in ("a", "b"):
            pop, truth = synthesize(cfg)
            save_population(pop, truth, tmp_path / f"{run}.csv", tmp_path / f"{run}.json")
            blobs.append(
                ((tmp_path / f"{run}.csv").read_bytes(), (tmp_path / f"{run}.json").read_bytes())
            )
        assert blobs[0] == blobs[1]

    def test_round_trip_lossless(self, tmp_path, small_pop):
        pop, truth = small_pop
        save_population(pop, truth, tmp_path / "p.csv", tmp_path / "p.json")
        pop2, truth2 = load_population(tmp_path / "p.csv", tmp_path / "p.json")
        assert np.array_equal(pop.hours, pop2.hours)
        assert np.array_equal(pop.employment, pop2.employment)
        for var in VARIABLES:
            assert np.array_equal(pop.covariates[var], pop2.covariates[var])
            assert truth.national_totals[var] == truth2.national_totals[var]
            assert np.array_equal(truth.stratum_means[var], truth2.stratum_means[var])

    def test_post_resolution_rates_match_procedure(self, desk_pop):
        # resolving E=U=1 in the 62:4 ratio thins unemployment to roughly
        # p_U * (1 - p_E * 62/66) ~ 1.7%; employment barely moves
        pop, truth = desk_pop
        p_e, p_u = truth.national_means["employment"], truth.national_means["unemployment"]
        assert 0.56 < p_e < 0.66
        assert 0.012 <= p_u <= 0.024
        assert 36.0 <= truth.national_means["hours"] <= 38.0
