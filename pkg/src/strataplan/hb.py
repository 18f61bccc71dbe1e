"""Area-level hierarchical models fitted by MCMC, with convergence diagnostics.

Two families share the same linking structure (stratum covariates plus an
exchangeable Gaussian stratum effect with a scaled-inverse-chi-square
variance prior):

* ``BinomialLogitModel`` - binomial counts with a logit link, sampled by
  adaptive random-walk Metropolis within Gibbs;
* ``FayHerriotModel`` - Gaussian direct estimates with known sampling
  variances, sampled by a full Gibbs sweep with closed-form conditionals.

Strata are processed in canonical label order internally, so fits are
invariant to the ordering of the input rows: relabelled data yield
identically relabelled output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, logit
from sklearn.base import BaseEstimator

from ._util import derive_stream
from .estimators import stratum_direct
from .popgen import BINARY_VARIABLES, SyntheticPopulation
from .sampling import Sample

_ADAPT_WINDOW = 50
_TARGET_ACCEPT = 0.44


@dataclass
class AreaData:
    """Observed stratum-level inputs for one model fit.

    Exactly one family of fields must be present: (successes, trials) for the
    binomial model or (direct, psi) for the Gaussian model.  ``z`` holds the
    linking covariates including the intercept column; ``weights`` are the
    population sizes used for domain and national aggregation.
    """

    z: np.ndarray
    weights: np.ndarray
    domain_of: np.ndarray
    successes: np.ndarray | None = None
    trials: np.ndarray | None = None
    direct: np.ndarray | None = None
    psi: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        self.domain_of = np.asarray(self.domain_of, dtype=np.int64)
        if self.labels is None:
            self.labels = np.arange(len(self.weights))
        else:
            self.labels = np.asarray(self.labels)
        for name in ("successes", "trials", "direct", "psi"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=float))

    @property
    def n_strata(self) -> int:
        return len(self.weights)

    @property
    def n_domains(self) -> int:
        return int(self.domain_of.max()) + 1

    @property
    def kind(self) -> str:
        if self.successes is not None and self.trials is not None:
            return "binomial"
        if self.direct is not None and self.psi is not None:
            return "gaussian"
        raise ValueError("area data carries neither binomial nor gaussian fields")

    def validate(self) -> None:
        h = self.n_strata
        if self.z.shape[0] != h or self.z.shape[1] < 1:
            raise ValueError(f"covariate matrix must be ({h}, >=1), got {self.z.shape}")
        if len(self.domain_of) != h or len(self.labels) != h:
            raise ValueError("domain map and labels must match the stratum count")
        if len(np.unique(self.labels)) != h:
            raise ValueError("stratum labels must be unique")
        if np.any(self.weights <= 0):
            raise ValueError("aggregation weights must be positive")
        kind = self.kind
        if kind == "binomial":
            if np.any(self.trials < 1):
                raise ValueError("binomial trials must be >= 1")
            if np.any((self.successes < 0) | (self.successes > self.trials)):
                raise ValueError("need 0 <= successes <= trials")
        else:
            if np.any(self.psi <= 0):
                raise ValueError("sampling variances psi must be positive")


@dataclass
class PosteriorDraws:
    """Retained draws per chain; stratum axes follow the input row order."""

    beta: np.ndarray            # (C, L, p)
    sigma2_v: np.ndarray        # (C, L)
    v: np.ndarray               # (C, L, H)
    area: np.ndarray            # (C, L, H) stratum means (p or theta scale)
    labels: np.ndarray
    acceptance_v: np.ndarray | None = None
    acceptance_beta: np.ndarray | None = None

    @property
    def n_chains(self) -> int:
        return self.beta.shape[0]

    @property
    def n_retained(self) -> int:
        return self.beta.shape[1]


@dataclass
class PosteriorSummary:
    """Per-area posterior summaries plus the convergence diagnostic table.

    Areas are ordered [national, domain 1..D, stratum rows in input order].
    SDs use the population convention (divide by the draw count) and the
    interval is the equal-tailed 95% band of the pooled draws.
    """

    area_keys: list
    mean: np.ndarray
    sd: np.ndarray
    cv: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    rhat: dict
    rhat_max: float
    flags: list = field(default_factory=list)

    def _index(self, area: tuple) -> int:
        return self.area_keys.index(tuple(area))

    def mean_of(self, area) -> float:
        return float(self.mean[self._index(area)])

    def sd_of(self, area) -> float:
        return float(self.sd[self._index(area)])

    def cv_of(self, area) -> float:
        idx = self._index(area)
        if self.mean[idx] <= 0:
            raise ValueError(f"CV undefined for non-positive posterior mean at {area}")
        return float(self.cv[idx])

    def ci_of(self, area):
        idx = self._index(area)
        return float(self.ci_low[idx]), float(self.ci_high[idx])

    def covers(self, area, value) -> bool:
        lo, hi = self.ci_of(area)
        return lo <= value <= hi

    def to_dict(self) -> dict:
        return {
            "areas": [
                {
                    "area": "/".join(str(p) for p in key),
                    "mean": float(self.mean[i]),
                    "sd": float(self.sd[i]),
                    "cv": float(self.cv[i]),
                    "ci_low": float(self.ci_low[i]),
                    "ci_high": float(self.ci_high[i]),
                }
                for i, key in enumerate(self.area_keys)
            ],
            "rhat": {k: float(v) for k, v in self.rhat.items()},
            "rhat_max": float(self.rhat_max),
            "flags": list(self.flags),
        }


def hb_cv(summary: PosteriorSummary, area: tuple) -> float:
    """Posterior coefficient of variation for one area."""
    return summary.cv_of(area)


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor over retained draws.

    ``chains`` is (C, L) or a list of equal-length 1-D arrays.  Identical
    constant chains give exactly 1; constant chains that disagree give inf.
    """
    arr = np.asarray(chains, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need at least two chains of equal length")
    c, length = arr.shape
    if length < 2:
        raise ValueError("need at least 2 retained draws per chain")
    chain_means = arr.mean(axis=1)
    w = arr.var(axis=1, ddof=1).mean()
    b = length * chain_means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else float("inf")
    return float(np.sqrt(((length - 1) / length * w + b / length) / w))


def aggregate_domains(area_draws: np.ndarray, weights, domain_of) -> np.ndarray:
    """Weighted per-draw aggregates, column 0 national then domains 1..D.

    Operating draw-by-draw preserves posterior correlation across strata, so
    interval widths at the aggregate level are honest.
    """
    weights = np.asarray(weights, dtype=float)
    domain_of = np.asarray(domain_of)
    n_domains = int(domain_of.max()) + 1
    w = np.zeros((len(weights), n_domains + 1))
    w[:, 0] = weights / weights.sum()
    for d in range(n_domains):
        mask = domain_of == d
        w[mask, d + 1] = weights[mask] / weights[mask].sum()
    return area_draws @ w


def mcse_mean(chains, n_batches: int = 20) -> float:
    """Batch-means Monte Carlo standard error of the pooled posterior mean."""
    arr = np.atleast_2d(np.asarray(chains, dtype=float))
    per_chain = max(2, n_batches // arr.shape[0])
    batch_means = []
    for row in arr:
        size = len(row) // per_chain
        for b in range(per_chain):
            batch_means.append(row[b * size : (b + 1) * size].mean())
    batch_means = np.asarray(batch_means)
    return float(batch_means.std(ddof=1) / np.sqrt(len(batch_means)))


class _AreaModel(BaseEstimator):
    """Shared chain orchestration, aggregation, and summary machinery."""

    def __init__(
        self,
        nu=2.0,
        s2=1.0,
        tau2_beta=1e6,
        chains=3,
        iterations=2000,
        burn_in=1000,
        seed=0,
        cv_method="sd",
    ):
        self.nu = nu
        self.s2 = s2
        self.tau2_beta = tau2_beta
        self.chains = chains
        self.iterations = iterations
        self.burn_in = burn_in
        self.seed = seed
        self.cv_method = cv_method

    def _check_params(self):
        if self.tau2_beta <= 0 or self.nu <= 0 or self.s2 <= 0:
            raise ValueError("tau2_beta, nu and s2 must all be positive")
        if self.chains < 2:
            raise ValueError("need at least two chains for convergence diagnostics")
        if self.iterations < 1 or self.burn_in < 0:
            raise ValueError("iterations must be >= 1 and burn_in >= 0")
        if self.cv_method not in ("sd", "ci_halfwidth"):
            raise ValueError(f"unknown cv_method {self.cv_method!r}")

    def fit(self, data: AreaData):
        self._check_params()
        data.validate()
        self._check_family(data)

        order = np.argsort(data.labels, kind="stable")
        inverse = np.argsort(order, kind="stable")
        canon = _reorder(data, order)

        results = [
            self._run_chain(canon, derive_stream(self.seed, "chain", c), c)
            for c in range(self.chains)
        ]
        beta = np.stack([r["beta"] for r in results])
        sigma2 = np.stack([r["sigma2"] for r in results])
        v = np.stack([r["v"] for r in results])
        area = np.stack([r["area"] for r in results])

        agg = aggregate_domains(area, canon.weights, canon.domain_of)
        acc_v = acc_beta = None
        if "acc_v_total" in results[0]:
            acc_v = _pool_acceptance(results, "acc_v_total")[inverse]
            acc_beta = _pool_acceptance(results, "acc_beta_total")
        draws = PosteriorDraws(
            beta=beta,
            sigma2_v=sigma2,
            v=v[:, :, inverse],
            area=area[:, :, inverse],
            labels=np.asarray(data.labels),
            acceptance_v=acc_v,
            acceptance_beta=acc_beta,
        )
        self.draws_ = draws
        self.summary_ = self._summarize(draws, area, agg, canon, data, inverse)
        self.rhat_max_ = self.summary_.rhat_max
        return self

    def _summarize(self, draws, area_canon, agg, canon, data, inverse):
        n_domains = canon.n_domains
        area_keys = [("national",)] + [("domain", d) for d in range(1, n_domains + 1)]
        area_keys += [("stratum", lab) for lab in np.asarray(data.labels).tolist()]

        pooled_cols = [agg[:, :, j].reshape(-1) for j in range(n_domains + 1)]
        pooled_cols += [draws.area[:, :, i].reshape(-1) for i in range(canon.n_strata)]
        mean = np.array([col.mean() for col in pooled_cols])
        sd = np.array([col.std() for col in pooled_cols])
        ci = np.array([np.quantile(col, [0.025, 0.975]) for col in pooled_cols])
        if self.cv_method == "sd":
            spread = sd
        else:
            spread = (ci[:, 1] - ci[:, 0]) / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            cv = np.where(mean != 0, spread / np.abs(mean), np.inf)

        rhat = {}
        for j in range(draws.beta.shape[2]):
            rhat[f"beta[{j}]"] = gelman_rubin(draws.beta[:, :, j])
        rhat["sigma2_v"] = gelman_rubin(draws.sigma2_v)
        rhat["national"] = gelman_rubin(agg[:, :, 0])
        for d in range(1, n_domains + 1):
            rhat[f"domain[{d}]"] = gelman_rubin(agg[:, :, d])
        for i, lab in enumerate(np.asarray(data.labels).tolist()):
            rhat[f"stratum[{lab}]"] = gelman_rubin(draws.area[:, :, i])

        flags = []
        if draws.acceptance_v is not None and np.any(draws.acceptance_v < 0.05):
            low = np.flatnonzero(draws.acceptance_v < 0.05).tolist()
            flags.append(f"low Metropolis acceptance (<5%) for stratum effects {low}")
        if draws.acceptance_beta is not None and np.any(draws.acceptance_beta < 0.05):
            low = np.flatnonzero(draws.acceptance_beta < 0.05).tolist()
            flags.append(f"low Metropolis acceptance (<5%) for coefficients {low}")

        return PosteriorSummary(
            area_keys=area_keys,
            mean=mean,
            sd=sd,
            cv=cv,
            ci_low=ci[:, 0],
            ci_high=ci[:, 1],
            rhat=rhat,
            rhat_max=float(max(rhat.values())),
            flags=flags,
        )

    def _dispersed_offset(self, chain_index: int) -> float:
        # 0, +1, -1, +2, -2, ... so chain starts straddle the central fit
        k = (chain_index + 1) // 2
        return float(k if chain_index % 2 == 1 else -k)

    def _dispersion_spread(self, data_spread: float) -> float:
        # overdispersed starts on the prior scale, capped by the observed
        # between-stratum spread so diffuse priors stay recoverable in burn-in
        cap = max(float(data_spread), 0.1)
        return min(np.sqrt(self.s2), cap)

    def _check_family(self, data):
        raise NotImplementedError

    def _run_chain(self, data, rng, chain_index):
        raise NotImplementedError


def _centered(z: np.ndarray):
    """Centre non-intercept columns; returns (z_centred, column shifts).

    The samplers mix far better when the intercept is decorrelated from the
    slopes; the linear predictor is unchanged and coefficient draws are mapped
    back to the original parameterisation before being stored.
    """
    if not np.all(z[:, 0] == z[0, 0]):
        return z, np.zeros(z.shape[1])  # no intercept column; leave as-is
    shift = z.mean(axis=0)
    shift[0] = 0.0
    return z - shift, shift


def _uncenter(beta_draws: np.ndarray, shift: np.ndarray) -> np.ndarray:
    out = beta_draws.copy()
    out[:, 0] = out[:, 0] - beta_draws[:, 1:] @ shift[1:]
    return out


def _reorder(data: AreaData, order: np.ndarray) -> AreaData:
    pick = lambda arr: None if arr is None else arr[order]
    return AreaData(
        z=data.z[order],
        weights=data.weights[order],
        domain_of=data.domain_of[order],
        successes=pick(data.successes),
        trials=pick(data.trials),
        direct=pick(data.direct),
        psi=pick(data.psi),
        labels=np.asarray(data.labels)[order],
    )


def _pool_acceptance(results, key):
    return np.mean([r[key] for r in results], axis=0)


class FayHerriotModel(_AreaModel):
    """Gaussian area-level model with known sampling variances (Gibbs sampler).

    Each stratum mean gets the precision-weighted blend of its direct
    estimate and the covariate prediction; the effect variance follows a
    conjugate scaled-inverse-chi-square update.
    """

    def _check_family(self, data):
        if data.kind != "gaussian":
            raise ValueError("FayHerriotModel requires direct estimates and psi")

    def _run_chain(self, data, rng, chain_index):
        z, shift = _centered(data.z)
        psi, theta_hat = data.psi, data.direct
        h, p = z.shape
        total = self.burn_in + self.iterations

        wls_prec = z.T @ (z / psi[:, None]) + np.eye(p) / self.tau2_beta
        beta = np.linalg.solve(wls_prec, z.T @ (theta_hat / psi))
        offset = self._dispersed_offset(chain_index)
        beta = beta.copy()
        beta[0] += offset * 2.0 * self._dispersion_spread(theta_hat.std())
        sigma2 = self.s2 * 4.0**offset
        v = np.zeros(h)

        keep_beta = np.empty((self.iterations, p))
        keep_sigma2 = np.empty(self.iterations)
        keep_v = np.empty((self.iterations, h))
        keep_area = np.empty((self.iterations, h))
        eye_tau = np.eye(p) / self.tau2_beta
        for t in range(total):
            linpred = z @ beta
            prec = 1.0 / psi + 1.0 / sigma2
            mean = (theta_hat - linpred) / psi / prec
            v = mean + rng.standard_normal(h) / np.sqrt(prec)

            prec_mat = z.T @ (z / psi[:, None]) + eye_tau
            rhs = z.T @ ((theta_hat - v) / psi)
            chol = np.linalg.cholesky(prec_mat)
            mean_beta = np.linalg.solve(prec_mat, rhs)
            beta = mean_beta + np.linalg.solve(chol.T, rng.standard_normal(p))

            sigma2 = (self.nu * self.s2 + v @ v) / rng.chisquare(self.nu + h)

            if t >= self.burn_in:
                keep = t - self.burn_in
                keep_beta[keep] = beta
                keep_sigma2[keep] = sigma2
                keep_v[keep] = v
                keep_area[keep] = z @ beta + v
        return {
            "beta": _uncenter(keep_beta, shift),
            "sigma2": keep_sigma2,
            "v": keep_v,
            "area": keep_area,
        }


class BinomialLogitModel(_AreaModel):
    """Binomial counts with a logit link (Metropolis-within-Gibbs sampler).

    Stratum effects are updated jointly by componentwise random-walk
    Metropolis (one proposal per stratum per sweep), coefficients by scalar
    random walks, and the effect variance by its conjugate draw.  Proposal
    scales adapt toward a 0.44 acceptance rate during burn-in only.
    """

    def _check_family(self, data):
        if data.kind != "binomial":
            raise ValueError("BinomialLogitModel requires successes and trials")

    @staticmethod
    def _loglik_terms(eta, y, n):
        # y*log(p) + (n-y)*log(1-p) with p = expit(eta), computed stably
        return y * eta - n * np.logaddexp(0.0, eta)

    def _run_chain(self, data, rng, chain_index):
        z, shift = _centered(data.z)
        y, n = data.successes, data.trials
        h, p = z.shape
        total = self.burn_in + self.iterations

        emp_logit = logit((y + 0.5) / (n + 1.0))
        beta = np.linalg.lstsq(z, emp_logit, rcond=None)[0]
        offset = self._dispersed_offset(chain_index)
        spread = self._dispersion_spread(emp_logit.std())
        beta[0] += offset * 2.0 * spread
        sigma2 = self.s2 * 4.0**offset
        v = rng.standard_normal(h) * min(np.sqrt(sigma2), spread)

        eta = z @ beta + v
        if not np.all(np.isfinite(self._loglik_terms(eta, y, n))):
            raise ValueError("non-finite log-posterior at initialisation")

        step_v = np.full(h, 1.0)
        step_beta = np.full(p, 0.25)
        step_shift = np.full(p, 0.5)
        acc_v_win = np.zeros(h)
        acc_b_win = np.zeros(p)
        acc_s_win = np.zeros(p)
        acc_v_total = np.zeros(h)
        acc_b_total = np.zeros(p)

        keep_beta = np.empty((self.iterations, p))
        keep_sigma2 = np.empty(self.iterations)
        keep_v = np.empty((self.iterations, h))
        keep_area = np.empty((self.iterations, h))

        ll = self._loglik_terms(eta, y, n)
        for t in range(total):
            # stratum effects, one independent proposal per stratum
            prop_v = v + step_v * rng.standard_normal(h)
            eta_prop = eta + (prop_v - v)
            ll_prop = self._loglik_terms(eta_prop, y, n)
            log_ratio = ll_prop - ll - (prop_v**2 - v**2) / (2.0 * sigma2)
            accept = np.log(rng.random(h)) < log_ratio
            v = np.where(accept, prop_v, v)
            eta = np.where(accept, eta_prop, eta)
            ll = np.where(accept, ll_prop, ll)
            acc_v_win += accept
            if t >= self.burn_in:
                acc_v_total += accept

            # regression coefficients, scalar random walks
            for j in range(p):
                delta = step_beta[j] * rng.standard_normal()
                eta_prop = eta + z[:, j] * delta
                ll_prop = self._loglik_terms(eta_prop, y, n)
                bj_new = beta[j] + delta
                log_ratio = (
                    ll_prop.sum()
                    - ll.sum()
                    - (bj_new**2 - beta[j] ** 2) / (2.0 * self.tau2_beta)
                )
                if np.log(rng.random()) < log_ratio:
                    beta[j] = bj_new
                    eta = eta_prop
                    ll = ll_prop
                    acc_b_win[j] += 1
                    if t >= self.burn_in:
                        acc_b_total[j] += 1

            # translation moves: shift beta_j and counter-shift v along that
            # covariate, leaving the linear predictor (hence the likelihood)
            # untouched; only the priors change. Breaks the slow coupled
            # random walk between the coefficients and the stratum effects.
            for j in range(p):
                delta = step_shift[j] * rng.standard_normal()
                v_prop = v - delta * z[:, j]
                bj_new = beta[j] + delta
                log_ratio = (
                    -(v_prop @ v_prop - v @ v) / (2.0 * sigma2)
                    - (bj_new**2 - beta[j] ** 2) / (2.0 * self.tau2_beta)
                )
                if np.log(rng.random()) < log_ratio:
                    beta[j] = bj_new
                    v = v_prop
                    acc_s_win[j] += 1

            sigma2 = (self.nu * self.s2 + v @ v) / rng.chisquare(self.nu + h)

            if t < self.burn_in and (t + 1) % _ADAPT_WINDOW == 0:
                step_v *= np.exp(acc_v_win / _ADAPT_WINDOW - _TARGET_ACCEPT)
                step_beta *= np.exp(acc_b_win / _ADAPT_WINDOW - _TARGET_ACCEPT)
                step_shift *= np.exp(acc_s_win / _ADAPT_WINDOW - _TARGET_ACCEPT)
                np.clip(step_v, 1e-8, 1e6, out=step_v)
                np.clip(step_beta, 1e-8, 1e6, out=step_beta)
                np.clip(step_shift, 1e-8, 1e6, out=step_shift)
                acc_v_win[:] = 0.0
                acc_b_win[:] = 0.0
                acc_s_win[:] = 0.0

            if t >= self.burn_in:
                keep = t - self.burn_in
                keep_beta[keep] = beta
                keep_sigma2[keep] = sigma2
                keep_v[keep] = v
                keep_area[keep] = expit(eta)
        return {
            "beta": _uncenter(keep_beta, shift),
            "sigma2": keep_sigma2,
            "v": keep_v,
            "area": keep_area,
            "acc_v_total": acc_v_total / self.iterations,
            "acc_beta_total": acc_b_total / self.iterations,
        }


def area_data_from_sample(
    population: SyntheticPopulation, sample: Sample, variable: str
) -> AreaData:
    """Assemble model inputs for one variable from a drawn sample.

    The linking covariates are the population stratum covariate means for
    that variable (auxiliary information known for every stratum).  For the
    continuous variable the sampling variances carry the stratum design
    effect and are floored at a tiny positive value when a stratum is
    exhausted (census strata have no sampling variance).
    """
    strata = population.strata
    z = np.column_stack(
        [
            np.ones(strata.n_strata),
            strata.cov_means[variable][:, 0],
            strata.cov_means[variable][:, 1],
        ]
    )
    common = dict(
        z=z,
        weights=strata.sizes.astype(float),
        domain_of=strata.domain_of.copy(),
        labels=np.arange(strata.n_strata),
    )
    if variable in BINARY_VARIABLES:
        values = population.values(variable)
        counts = sample.counts
        if np.any(counts < 1):
            raise ValueError("every stratum needs at least one sampled unit")
        successes = np.array(
            [values[sample.units[h]].sum() for h in range(strata.n_strata)], dtype=float
        )
        return AreaData(successes=successes, trials=counts.astype(float), **common)
    theta, psi, _, _ = stratum_direct(sample, population, variable)
    positive = psi[psi > 0]
    floor = 1e-10 * positive.mean() if len(positive) else 1e-10
    return AreaData(direct=theta, psi=np.maximum(psi, floor), **common)


def draws_frame(draws: PosteriorDraws) -> pd.DataFrame:
    """Long-format export of retained draws (chain, iteration, parameter, value)."""
    rows = []
    c, length, p = draws.beta.shape
    for chain in range(c):
        for j in range(p):
            rows.append(
                pd.DataFrame(
                    {
                        "chain": chain,
                        "iteration": np.arange(length),
                        "parameter": f"beta[{j}]",
                        "value": draws.beta[chain, :, j],
                    }
                )
            )
        rows.append(
            pd.DataFrame(
                {
                    "chain": chain,
                    "iteration": np.arange(length),
                    "parameter": "sigma2_v",
                    "value": draws.sigma2_v[chain],
                }
            )
        )
        for i, lab in enumerate(draws.labels.tolist()):
            rows.append(
                pd.DataFrame(
                    {
                        "chain": chain,
                        "iteration": np.arange(length),
                        "parameter": f"stratum[{lab}]",
                        "value": draws.area[chain, :, i],
                    }
                )
            )
    return pd.concat(rows, ignore_index=True)
