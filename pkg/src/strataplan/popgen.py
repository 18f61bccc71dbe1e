"""Synthetic labour-force population with known truth at every aggregation level.

Builds a unit-level population of employment / unemployment indicators and
weekly hours, organised as strata nested in geographic domains.  Stratum-level
latent models (logit-normal for the binary variables, a logistic-link
truncated normal for hours) drive between-stratum heterogeneity; everything is
generated from named substreams of a single seed so populations are exactly
reproducible.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, logit, ndtr, ndtri

from ._util import apportion, derive_stream, nested_sums

VARIABLES = ("employment", "unemployment", "hours")
BINARY_VARIABLES = ("employment", "unemployment")

NATIONAL = ("national",)


def domain_area(d: int) -> tuple:
    """Area key for 1-based domain ``d``."""
    return ("domain", d)


def stratum_area(h: int) -> tuple:
    """Area key for 0-based stratum ``h``."""
    return ("stratum", h)


@dataclass(frozen=True)
class BinaryVariableParams:
    """Latent logit-normal model for a binary status variable."""

    rate: float                     # national rate encoded by the intercept
    coef1: float
    coef2: float
    domain_sd: float
    stratum_sd: float
    cov1: tuple[float, float]       # (mean, sd) of the first stratum covariate
    cov2: tuple[float, float]


@dataclass(frozen=True)
class HoursParams:
    """Truncated-normal hours model with a logistic stratum-mean link."""

    coef1: float
    coef2: float
    within_sd: float
    truncation: tuple[float, float]
    link_offset: float
    link_scale: float
    cov1: tuple[float, float]
    cov2: tuple[float, float]


def _default_employment() -> BinaryVariableParams:
    return BinaryVariableParams(0.62, 0.15, 0.10, 0.20, 0.15, (3.0, 1.0), (4.0, 1.5))


def _default_unemployment() -> BinaryVariableParams:
    return BinaryVariableParams(0.04, 0.15, 0.10, 0.10, 0.08, (3.0, 1.0), (4.0, 1.5))


def _default_hours() -> HoursParams:
    return HoursParams(0.10, 0.08, 12.0, (15.0, 60.0), 15.0, 45.0, (0.0, 3.0), (0.0, 3.0))


@dataclass(frozen=True)
class PopulationConfig:
    n_units: int = 1_000_000
    n_strata: int = 100
    n_domains: int = 10
    deff_range: tuple[float, float] = (1.1, 1.2)
    employment: BinaryVariableParams = field(default_factory=_default_employment)
    unemployment: BinaryVariableParams = field(default_factory=_default_unemployment)
    hours: HoursParams = field(default_factory=_default_hours)
    unit_noise_sd: float = 0.2
    stratum_size_spread: float = 0.3    # log-normal sigma of stratum-size weights
    seed: int = 20260301

    def validate(self) -> None:
        if not (self.n_units >= self.n_strata >= self.n_domains >= 1):
            raise ValueError(
                "require n_units >= n_strata >= n_domains >= 1, got "
                f"n_units={self.n_units}, n_strata={self.n_strata}, n_domains={self.n_domains}"
            )
        lo, hi = self.deff_range
        if lo < 1.0 or hi < lo:
            raise ValueError(f"deff_range must satisfy 1 <= low <= high, got {self.deff_range}")
        for name in ("employment", "unemployment"):
            p = getattr(self, name)
            if not 0.0 < p.rate < 1.0:
                raise ValueError(f"{name}.rate must be in (0, 1), got {p.rate}")
            if p.domain_sd < 0 or p.stratum_sd < 0:
                raise ValueError(f"{name} SDs must be >= 0")
            for cov in (p.cov1, p.cov2):
                if cov[1] < 0:
                    raise ValueError(f"{name} covariate sd must be >= 0, got {cov}")
        hrs = self.hours
        if hrs.truncation[0] >= hrs.truncation[1]:
            raise ValueError(f"hours.truncation must have lo < hi, got {hrs.truncation}")
        if hrs.within_sd < 0:
            raise ValueError("hours.within_sd must be >= 0")
        if self.unit_noise_sd < 0:
            raise ValueError("unit_noise_sd must be >= 0")
        if self.stratum_size_spread < 0:
            raise ValueError("stratum_size_spread must be >= 0")

    def variable_params(self, variable: str):
        if variable not in VARIABLES:
            raise KeyError(f"unknown variable {variable!r}")
        return getattr(self, variable)

    @staticmethod
    def from_dict(raw: dict) -> "PopulationConfig":
        """Build from a plain mapping, e.g. the [population] table of a TOML file."""
        raw = dict(raw)

        def binary(name, default):
            sub = raw.pop(name, None)
            if sub is None:
                return default
            coefs = sub.get("coefficients", (default.coef1, default.coef2))
            return BinaryVariableParams(
                rate=sub.get("national_mean", default.rate),
                coef1=coefs[0],
                coef2=coefs[1],
                domain_sd=sub.get("domain_sd", default.domain_sd),
                stratum_sd=sub.get("stratum_sd", default.stratum_sd),
                cov1=tuple(sub.get("covariate1", default.cov1)),
                cov2=tuple(sub.get("covariate2", default.cov2)),
            )

        hrs_raw = raw.pop("hours", None)
        hrs_default = _default_hours()
        if hrs_raw is None:
            hrs = hrs_default
        else:
            coefs = hrs_raw.get("coefficients", (hrs_default.coef1, hrs_default.coef2))
            hrs = HoursParams(
                coef1=coefs[0],
                coef2=coefs[1],
                within_sd=hrs_raw.get("within_sd", hrs_default.within_sd),
                truncation=tuple(hrs_raw.get("truncation", hrs_default.truncation)),
                link_offset=hrs_raw.get("link_offset", hrs_default.link_offset),
                link_scale=hrs_raw.get("link_scale", hrs_default.link_scale),
                cov1=tuple(hrs_raw.get("covariate1", hrs_default.cov1)),
                cov2=tuple(hrs_raw.get("covariate2", hrs_default.cov2)),
            )

        employment = binary("employment", _default_employment())
        unemployment = binary("unemployment", _default_unemployment())
        kwargs = {}
        for key, target in [
            ("total_size", "n_units"),
            ("strata", "n_strata"),
            ("domains", "n_domains"),
            ("unit_noise_sd", "unit_noise_sd"),
            ("stratum_size_spread", "stratum_size_spread"),
            ("seed", "seed"),
        ]:
            if key in raw:
                kwargs[target] = raw.pop(key)
        if "deff_low" in raw or "deff_high" in raw:
            kwargs["deff_range"] = (raw.pop("deff_low", 1.1), raw.pop("deff_high", 1.2))
        if raw:
            raise ValueError(f"unknown population config keys: {sorted(raw)}")
        cfg = PopulationConfig(
            employment=employment,
            unemployment=unemployment,
            hours=hrs,
            **kwargs,
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {
            "total_size": self.n_units,
            "strata": self.n_strata,
            "domains": self.n_domains,
            "deff_low": self.deff_range[0],
            "deff_high": self.deff_range[1],
            "unit_noise_sd": self.unit_noise_sd,
            "stratum_size_spread": self.stratum_size_spread,
            "seed": self.seed,
            "employment": _binary_dict(self.employment),
            "unemployment": _binary_dict(self.unemployment),
            "hours": {
                "coefficients": [self.hours.coef1, self.hours.coef2],
                "within_sd": self.hours.within_sd,
                "truncation": list(self.hours.truncation),
                "link_offset": self.hours.link_offset,
                "link_scale": self.hours.link_scale,
                "covariate1": list(self.hours.cov1),
                "covariate2": list(self.hours.cov2),
            },
        }


def _binary_dict(p: BinaryVariableParams) -> dict:
    return {
        "national_mean": p.rate,
        "coefficients": [p.coef1, p.coef2],
        "domain_sd": p.domain_sd,
        "stratum_sd": p.stratum_sd,
        "covariate1": list(p.cov1),
        "covariate2": list(p.cov2),
    }


def load_population_config(path) -> PopulationConfig:
    """Read a PopulationConfig from the [population] table of a TOML file."""
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return PopulationConfig.from_dict(raw.get("population", raw))


@dataclass(frozen=True)
class StrataInfo:
    """Per-stratum design metadata: sizes, domain membership, design effects."""

    sizes: np.ndarray                      # N_h
    domain_of: np.ndarray                  # 0-based domain index per stratum
    deff: np.ndarray                       # delta_h, shared across variables
    starts: np.ndarray                     # unit offsets, len H+1 (units stratum-contiguous)
    cov_means: dict                        # variable -> (H, 2) stratum means of unit covariates

    @property
    def n_strata(self) -> int:
        return len(self.sizes)

    @property
    def n_domains(self) -> int:
        return int(self.domain_of.max()) + 1

    def stratum_slice(self, h: int) -> slice:
        return slice(int(self.starts[h]), int(self.starts[h + 1]))

    def domain_strata(self, d: int) -> np.ndarray:
        """0-based stratum indices of 1-based domain d (d=0 means all strata)."""
        if d == 0:
            return np.arange(self.n_strata)
        return np.flatnonzero(self.domain_of == d - 1)


@dataclass(frozen=True)
class SyntheticPopulation:
    config: PopulationConfig
    stratum_of: np.ndarray                 # (N,) stratum index, nondecreasing
    employment: np.ndarray                 # (N,) int8
    unemployment: np.ndarray               # (N,) int8
    hours: np.ndarray                      # (N,) float64
    covariates: dict                       # variable -> (N, 2) unit-level values
    strata: StrataInfo

    @property
    def n_units(self) -> int:
        return len(self.stratum_of)

    def values(self, variable: str) -> np.ndarray:
        if variable == "employment":
            return self.employment
        if variable == "unemployment":
            return self.unemployment
        if variable == "hours":
            return self.hours
        raise KeyError(f"unknown variable {variable!r}")


@dataclass(frozen=True)
class TruthRegistry:
    """True means and totals for every (area, variable) pair.

    Domain totals are exact sums of their stratum totals and the national
    total is the exact sum of the domain totals, so the aggregation identity
    holds by construction.
    """

    stratum_sizes: np.ndarray
    domain_sizes: np.ndarray
    stratum_means: dict
    stratum_totals: dict
    domain_means: dict
    domain_totals: dict
    national_means: dict
    national_totals: dict

    @property
    def n_domains(self) -> int:
        return len(self.domain_sizes)

    def true_mean(self, variable: str, area: tuple) -> float:
        kind = area[0]
        if kind == "national":
            return self.national_means[variable]
        if kind == "domain":
            return float(self.domain_means[variable][area[1] - 1])
        if kind == "stratum":
            return float(self.stratum_means[variable][area[1]])
        raise KeyError(f"unknown area {area!r}")

    def true_total(self, variable: str, area: tuple) -> float:
        kind = area[0]
        if kind == "national":
            return self.national_totals[variable]
        if kind == "domain":
            return float(self.domain_totals[variable][area[1] - 1])
        if kind == "stratum":
            return float(self.stratum_totals[variable][area[1]])
        raise KeyError(f"unknown area {area!r}")

    def area_truths(self, variable: str) -> np.ndarray:
        """True means ordered [national, domain 1..D]."""
        return np.concatenate(
            [[self.national_means[variable]], self.domain_means[variable]]
        )


# ---------------------------------------------------------------------------
# Generation building blocks
# ---------------------------------------------------------------------------


def gen_stratum_sizes(config: PopulationConfig, rng: np.random.Generator) -> np.ndarray:
    """Heterogeneous stratum sizes from normalised log-normal weights.

    Largest-remainder rounding keeps the total exact and every stratum gets
    at least one unit.
    """
    weights = np.exp(rng.normal(0.0, config.stratum_size_spread, config.n_strata))
    return apportion(weights, config.n_units, minimum=1)


def assign_domains(n_strata: int, n_domains: int) -> np.ndarray:
    """Contiguous, balanced blocks of strata per domain (sizes differ by <= 1)."""
    sizes = np.full(n_domains, n_strata // n_domains, dtype=np.int64)
    sizes[: n_strata % n_domains] += 1
    return np.repeat(np.arange(n_domains), sizes)


def gen_design_effects(config: PopulationConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-stratum design effects, drawn once and shared by all variables."""
    lo, hi = config.deff_range
    if hi == lo:
        return np.full(config.n_strata, float(lo))
    return rng.uniform(lo, hi, config.n_strata)


def gen_covariates(
    config: PopulationConfig,
    variable: str,
    stratum_sizes: np.ndarray,
    stratum_rng: np.random.Generator,
    unit_rng: np.random.Generator,
):
    """Stratum covariate draws plus unit-level noise.

    Returns (stratum_values (H, 2), unit_values (N, 2)).  With zero unit
    noise every unit carries its stratum value.
    """
    params = config.variable_params(variable)
    h = len(stratum_sizes)
    stratum_values = np.column_stack(
        [
            stratum_rng.normal(params.cov1[0], params.cov1[1], h),
            stratum_rng.normal(params.cov2[0], params.cov2[1], h),
        ]
    )
    expanded = np.repeat(stratum_values, stratum_sizes, axis=0)
    if config.unit_noise_sd > 0:
        expanded = expanded + unit_rng.normal(
            0.0, config.unit_noise_sd, expanded.shape
        )
    return stratum_values, expanded


def stratum_binary_prob(
    x1, x2, domain_effect, stratum_effect, params: BinaryVariableParams
) -> np.ndarray:
    """Stratum-level success probability of the latent logit model.

    With covariates at their configured means and zero random effects this
    returns exactly ``params.rate``.
    """
    eta = (
        logit(params.rate)
        + params.coef1 * (np.asarray(x1) - params.cov1[0])
        + params.coef2 * (np.asarray(x2) - params.cov2[0])
        + np.asarray(domain_effect)
        + np.asarray(stratum_effect)
    )
    return expit(eta)


def stratum_employment_prob(x1, x2, domain_effect, stratum_effect, config) -> np.ndarray:
    return stratum_binary_prob(x1, x2, domain_effect, stratum_effect, config.employment)


def stratum_unemployment_prob(x1, x2, domain_effect, stratum_effect, config) -> np.ndarray:
    return stratum_binary_prob(x1, x2, domain_effect, stratum_effect, config.unemployment)


def gen_binary_units(
    config: PopulationConfig,
    variable: str,
    stratum_covariates: np.ndarray,
    stratum_sizes: np.ndarray,
    domain_of: np.ndarray,
    effect_rng: np.random.Generator,
    unit_rng: np.random.Generator,
):
    """Draw unit indicators for one binary variable.

    Returns (indicators (N,), stratum probabilities (H,)).
    """
    params = config.variable_params(variable)
    gamma = effect_rng.normal(0.0, params.domain_sd, int(domain_of.max()) + 1)
    eps = effect_rng.normal(0.0, params.stratum_sd, len(stratum_sizes))
    p = stratum_binary_prob(
        stratum_covariates[:, 0],
        stratum_covariates[:, 1],
        gamma[domain_of],
        eps,
        params,
    )
    per_unit_p = np.repeat(p, stratum_sizes)
    units = (unit_rng.random(len(per_unit_p)) < per_unit_p).astype(np.int8)
    return units, p


def resolve_overlap(
    employed: np.ndarray,
    unemployed: np.ndarray,
    rng: np.random.Generator,
    employment_rate: float = 0.62,
    unemployment_rate: float = 0.04,
):
    """Enforce mutual exclusivity of the two status indicators.

    Units flagged as both are reassigned to employed with probability
    rate_E / (rate_E + rate_U), preserving the marginal rates in expectation.
    Non-overlapping units are untouched.
    """
    employed = employed.copy()
    unemployed = unemployed.copy()
    both = np.flatnonzero((employed == 1) & (unemployed == 1))
    if len(both):
        keep_employed = rng.random(len(both)) < employment_rate / (
            employment_rate + unemployment_rate
        )
        unemployed[both[keep_employed]] = 0
        employed[both[~keep_employed]] = 0
    return employed, unemployed


def truncated_normal_mean(mu, sigma, lo, hi):
    """Closed-form mean of N(mu, sigma^2) truncated to [lo, hi]."""
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    phi = lambda t: np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
    return mu + sigma * (phi(a) - phi(b)) / (ndtr(b) - ndtr(a))


def gen_hours(
    config: PopulationConfig,
    stratum_covariates: np.ndarray,
    stratum_sizes: np.ndarray,
    rng: np.random.Generator,
):
    """Per-unit hours from the truncated-normal stratum model.

    Sampling is by inverse CDF so each unit consumes exactly one uniform,
    keeping streams aligned regardless of the truncation bounds.
    Returns (unit hours (N,), stratum means mu_h (H,)).
    """
    hrs = config.hours
    mu = hrs.link_offset + hrs.link_scale * expit(
        hrs.coef1 * stratum_covariates[:, 0] + hrs.coef2 * stratum_covariates[:, 1]
    )
    lo, hi = hrs.truncation
    per_unit_mu = np.repeat(mu, stratum_sizes)
    a = (lo - per_unit_mu) / hrs.within_sd
    b = (hi - per_unit_mu) / hrs.within_sd
    fa, fb = ndtr(a), ndtr(b)
    u = rng.random(len(per_unit_mu))
    draws = per_unit_mu + hrs.within_sd * ndtri(fa + u * (fb - fa))
    return np.clip(draws, lo, hi), mu


def _stratum_means(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    sums = np.add.reduceat(np.asarray(values, dtype=float), starts[:-1])
    return sums / np.diff(starts)


def build_truth(population: SyntheticPopulation) -> TruthRegistry:
    strata = population.strata
    h, d = strata.n_strata, strata.n_domains
    domain_sizes = np.bincount(strata.domain_of, weights=strata.sizes, minlength=d).astype(np.int64)
    stratum_means, stratum_totals = {}, {}
    domain_means, domain_totals = {}, {}
    national_means, national_totals = {}, {}
    for var in VARIABLES:
        values = population.values(var).astype(float)
        per_stratum = np.array(
            [math.fsum(values[strata.stratum_slice(i)]) for i in range(h)]
        )
        dom_totals, nat_total = nested_sums(per_stratum, strata.domain_of, d)
        stratum_totals[var] = per_stratum
        stratum_means[var] = per_stratum / strata.sizes
        domain_totals[var] = dom_totals
        domain_means[var] = dom_totals / domain_sizes
        national_totals[var] = nat_total
        national_means[var] = nat_total / population.n_units
    return TruthRegistry(
        stratum_sizes=strata.sizes.copy(),
        domain_sizes=domain_sizes,
        stratum_means=stratum_means,
        stratum_totals=stratum_totals,
        domain_means=domain_means,
        domain_totals=domain_totals,
        national_means=national_means,
        national_totals=national_totals,
    )


def synthesize(config: PopulationConfig):
    """Generate the full population and its truth registry from config.seed.

    Returns (SyntheticPopulation, TruthRegistry).  Truth is computed after
    the mutual-exclusivity resolution, so registry values describe the
    population as delivered.
    """
    config.validate()
    seed = config.seed

    sizes = gen_stratum_sizes(config, derive_stream(seed, "popgen", "sizes"))
    domain_of = assign_domains(config.n_strata, config.n_domains)
    deff = gen_design_effects(config, derive_stream(seed, "popgen", "deff"))
    starts = np.concatenate([[0], np.cumsum(sizes)])
    stratum_of = np.repeat(np.arange(config.n_strata, dtype=np.int32), sizes)

    stratum_covs, unit_covs = {}, {}
    for var in VARIABLES:
        stratum_covs[var], unit_covs[var] = gen_covariates(
            config,
            var,
            sizes,
            derive_stream(seed, "popgen", "cov", var),
            derive_stream(seed, "popgen", "cov-noise", var),
        )

    employed, _ = gen_binary_units(
        config,
        "employment",
        stratum_covs["employment"],
        sizes,
        domain_of,
        derive_stream(seed, "popgen", "effects", "employment"),
        derive_stream(seed, "popgen", "units", "employment"),
    )
    unemployed, _ = gen_binary_units(
        config,
        "unemployment",
        stratum_covs["unemployment"],
        sizes,
        domain_of,
        derive_stream(seed, "popgen", "effects", "unemployment"),
        derive_stream(seed, "popgen", "units", "unemployment"),
    )
    employed, unemployed = resolve_overlap(
        employed,
        unemployed,
        derive_stream(seed, "popgen", "overlap"),
        config.employment.rate,
        config.unemployment.rate,
    )
    hours, _ = gen_hours(
        config,
        stratum_covs["hours"],
        sizes,
        derive_stream(seed, "popgen", "units", "hours"),
    )

    cov_means = {
        var: np.column_stack(
            [
                _stratum_means(unit_covs[var][:, 0], starts),
                _stratum_means(unit_covs[var][:, 1], starts),
            ]
        )
        for var in VARIABLES
    }
    strata = StrataInfo(sizes, domain_of, deff, starts, cov_means)
    population = SyntheticPopulation(
        config=config,
        stratum_of=stratum_of,
        employment=employed,
        unemployment=unemployed,
        hours=hours,
        covariates=unit_covs,
        strata=strata,
    )
    return population, build_truth(population)


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

_CSV_FLOAT = "%.17g"  # shortest-guaranteed exact round-trip for IEEE doubles


def save_population(population: SyntheticPopulation, truth: TruthRegistry, csv_path, meta_path):
    """Write the unit file as CSV and stratum metadata plus truth as JSON."""
    cols = {
        "unit_id": np.arange(population.n_units, dtype=np.int64),
        "stratum": population.stratum_of,
        "domain": population.strata.domain_of[population.stratum_of] + 1,
        "employment": population.employment,
        "unemployment": population.unemployment,
        "hours": population.hours,
    }
    for var in VARIABLES:
        cols[f"{var}_x1"] = population.covariates[var][:, 0]
        cols[f"{var}_x2"] = population.covariates[var][:, 1]
    pd.DataFrame(cols).to_csv(csv_path, index=False, float_format=_CSV_FLOAT)

    meta = {
        "config": population.config.to_dict(),
        "strata": {
            "sizes": population.strata.sizes.tolist(),
            "domain_of": population.strata.domain_of.tolist(),
            "deff": population.strata.deff.tolist(),
            "cov_means": {
                var: population.strata.cov_means[var].tolist() for var in VARIABLES
            },
        },
        "truth": {
            "stratum_means": {v: truth.stratum_means[v].tolist() for v in VARIABLES},
            "stratum_totals": {v: truth.stratum_totals[v].tolist() for v in VARIABLES},
            "domain_means": {v: truth.domain_means[v].tolist() for v in VARIABLES},
            "domain_totals": {v: truth.domain_totals[v].tolist() for v in VARIABLES},
            "national_means": truth.national_means,
            "national_totals": truth.national_totals,
            "domain_sizes": truth.domain_sizes.tolist(),
        },
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_population(csv_path, meta_path):
    """Inverse of save_population. Returns (SyntheticPopulation, TruthRegistry)."""
    with open(meta_path) as fh:
        meta = json.load(fh)
    config = PopulationConfig.from_dict(meta["config"])
    frame = pd.read_csv(csv_path, float_precision="round_trip")
    strata_meta = meta["strata"]
    sizes = np.asarray(strata_meta["sizes"], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    strata = StrataInfo(
        sizes=sizes,
        domain_of=np.asarray(strata_meta["domain_of"], dtype=np.int64),
        deff=np.asarray(strata_meta["deff"], dtype=float),
        starts=starts,
        cov_means={v: np.asarray(strata_meta["cov_means"][v], dtype=float) for v in VARIABLES},
    )
    population = SyntheticPopulation(
        config=config,
        stratum_of=frame["stratum"].to_numpy(np.int32),
        employment=frame["employment"].to_numpy(np.int8),
        unemployment=frame["unemployment"].to_numpy(np.int8),
        hours=frame["hours"].to_numpy(float),
        covariates={
            var: np.column_stack(
                [frame[f"{var}_x1"].to_numpy(float), frame[f"{var}_x2"].to_numpy(float)]
            )
            for var in VARIABLES
        },
        strata=strata,
    )
    t = meta["truth"]
    truth = TruthRegistry(
        stratum_sizes=sizes.copy(),
        domain_sizes=np.asarray(t["domain_sizes"], dtype=np.int64),
        stratum_means={v: np.asarray(t["stratum_means"][v], dtype=float) for v in VARIABLES},
        stratum_totals={v: np.asarray(t["stratum_totals"][v], dtype=float) for v in VARIABLES},
        domain_means={v: np.asarray(t["domain_means"][v], dtype=float) for v in VARIABLES},
        domain_totals={v: np.asarray(t["domain_totals"][v], dtype=float) for v in VARIABLES},
        national_means={v: float(t["national_means"][v]) for v in VARIABLES},
        national_totals={v: float(t["national_totals"][v]) for v in VARIABLES},
    )
    return population, truth
