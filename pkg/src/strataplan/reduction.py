"""Search for the largest sample reduction the area models can sustain.

For each variable and candidate reduction fraction alpha, a nested sub-sample
of the master sample is fitted and must clear four gates: every area-level
posterior CV within its precision bound, the convergence diagnostic within
its limit, and national plus domain accuracy within tolerance of the truth
proxy.  The per-variable optimum is the largest eligible grid point and the
combined recommendation is the most conservative of them, re-checked for
every variable before being reported.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logit

from ._util import derive_stream, round_half_even
from .allocation import PrecisionTargets
from .hb import AreaData, BinomialLogitModel, FayHerriotModel, area_data_from_sample
from .popgen import BINARY_VARIABLES, SyntheticPopulation, TruthRegistry
from .sampling import Sample, nested_subsample

DEFAULT_ALPHA_GRID = tuple(round(0.05 * i, 2) for i in range(20))  # 0.00 .. 0.95
DEFAULT_NU_GRID = (2.0, 3.0, 5.0, 10.0, 20.0)


@dataclass(frozen=True)
class GateThresholds:
    """Limits for the convergence and accuracy gates (CV bounds live in targets)."""

    rhat_limit: float = 1.05
    national_are: float = 0.05
    domain_mare: float = 0.15
    domain_max_are: float = 0.50

    def __post_init__(self):
        for name in ("rhat_limit", "national_are", "domain_mare", "domain_max_are"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class GateReport:
    variable: str
    alpha: float
    cv_pass: bool
    cv_worst: float
    cv_worst_area: str
    rhat_pass: bool
    rhat_max: float
    national_pass: bool
    national_are: float
    domain_pass: bool
    domain_mare: float
    domain_max_are: float
    note: str = ""

    @property
    def eligible(self) -> bool:
        return self.cv_pass and self.rhat_pass and self.national_pass and self.domain_pass

    def to_row(self) -> dict:
        return {
            "variable": self.variable,
            "alpha": self.alpha,
            "cv_pass": self.cv_pass,
            "cv_worst": self.cv_worst,
            "cv_worst_area": self.cv_worst_area,
            "rhat_pass": self.rhat_pass,
            "rhat_max": self.rhat_max,
            "national_pass": self.national_pass,
            "national_are": self.national_are,
            "domain_pass": self.domain_pass,
            "domain_mare": self.domain_mare,
            "domain_max_are": self.domain_max_are,
            "eligible": self.eligible,
            "note": self.note,
        }


@dataclass
class AlphaSearchResult:
    variable: str
    alpha_star: float
    reports: list
    non_monotone: bool = False
    zero_failed: bool = False


@dataclass
class ReductionResult:
    per_variable: dict                  # variable -> AlphaSearchResult
    alpha_star: float
    n_reduced: int
    master_total: int
    recheck: dict                       # variable -> GateReport at combined alpha
    recheck_pass: bool


@dataclass
class PriorCandidate:
    nu: float
    s2: float
    coverage_count: int
    n_areas: int
    national_bias: float
    mare: float
    max_are: float
    rhat_max: float


@dataclass
class PriorGridResult:
    variable: str
    candidates: list
    selected: tuple                     # (nu, s2)
    coverage_threshold: int
    fallback: bool = False


def model_for(variable: str, params: dict):
    """Instantiate the right model family for a variable."""
    cls = BinomialLogitModel if variable in BINARY_VARIABLES else FayHerriotModel
    return cls(**params)


def truth_map(truth: TruthRegistry, variable: str) -> dict:
    """Area -> true mean, for the national and domain areas."""
    out = {("national",): truth.true_mean(variable, ("national",))}
    for d in range(1, truth.n_domains + 1):
        out[("domain", d)] = truth.true_mean(variable, ("domain", d))
    return out


def proxy_map_from_estimates(estimates: dict, variable: str) -> dict:
    """Truth proxy from prior-cycle direct estimates (area -> mean)."""
    out = {}
    for (var, area), est in estimates.items():
        if var == variable and area[0] in ("national", "domain"):
            out[area] = est.mean
    return out


def gate_quantities(summary, truth_proxy: dict, targets: PrecisionTargets, variable: str):
    """All measured gate inputs from one fitted summary."""
    n_domains = sum(1 for a in truth_proxy if a[0] == "domain")
    areas = [("national",)] + [("domain", d) for d in range(1, n_domains + 1)]
    cv_vals = {a: summary.cv_of(a) for a in areas}
    bounds = {a: targets.bound(variable, 0 if a[0] == "national" else a[1]) for a in areas}
    worst_area = max(areas, key=lambda a: cv_vals[a] / bounds[a])
    ares = {
        a: abs(summary.mean_of(a) - truth_proxy[a]) / truth_proxy[a] for a in areas
    }
    domain_ares = [ares[a] for a in areas if a[0] == "domain"]
    return {
        "cv": cv_vals,
        "cv_pass": all(cv_vals[a] <= bounds[a] for a in areas),
        "cv_worst": cv_vals[worst_area],
        "cv_worst_area": "/".join(str(p) for p in worst_area),
        "national_are": ares[("national",)],
        "domain_mare": float(np.mean(domain_ares)),
        "domain_max_are": float(np.max(domain_ares)),
    }


def evaluate_gates(
    variable: str,
    alpha: float,
    master: Sample,
    population: SyntheticPopulation,
    truth_proxy: dict,
    model_params: dict,
    targets: PrecisionTargets,
    thresholds: GateThresholds,
    seed: int,
) -> GateReport:
    """Fit the variable's model on the alpha-reduced sub-sample and gate it."""
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    sub = nested_subsample(master, 1.0 - alpha, alpha=alpha)
    try:
        data = area_data_from_sample(population, sub, variable)
        model = model_for(variable, {**model_params, "seed": derive_stream(seed, "gates", variable, alpha).integers(2**63)})
        model.fit(data)
    except Exception as exc:  # fit failure counts as a convergence failure
        return GateReport(
            variable=variable,
            alpha=alpha,
            cv_pass=False,
            cv_worst=float("nan"),
            cv_worst_area="",
            rhat_pass=False,
            rhat_max=float("inf"),
            national_pass=False,
            national_are=float("nan"),
            domain_pass=False,
            domain_mare=float("nan"),
            domain_max_are=float("nan"),
            note=f"model fit failed: {exc}",
        )
    summary = model.summary_
    q = gate_quantities(summary, truth_proxy, targets, variable)
    return GateReport(
        variable=variable,
        alpha=alpha,
        cv_pass=q["cv_pass"],
        cv_worst=q["cv_worst"],
        cv_worst_area=q["cv_worst_area"],
        rhat_pass=summary.rhat_max <= thresholds.rhat_limit,
        rhat_max=summary.rhat_max,
        national_pass=q["national_are"] <= thresholds.national_are,
        national_are=q["national_are"],
        domain_pass=(
            q["domain_mare"] <= thresholds.domain_mare
            and q["domain_max_are"] <= thresholds.domain_max_are
        ),
        domain_mare=q["domain_mare"],
        domain_max_are=q["domain_max_are"],
    )


def alpha_star_search(variable: str, alpha_grid, evaluate) -> AlphaSearchResult:
    """Evaluate every grid point; the optimum is the largest eligible one.

    ``evaluate`` maps an alpha to a GateReport.  A pass above a failure is
    recorded as a non-monotone pattern; if nothing passes the result is 0
    with a hard warning when the unreduced sample itself failed.
    """
    grid = sorted(alpha_grid)
    if not grid:
        raise ValueError("alpha grid is empty")
    reports = [evaluate(alpha) for alpha in grid]
    eligible = [r.alpha for r in reports if r.eligible]
    flags = [r.eligible for r in reports]
    non_monotone = any(
        not flags[i] and any(flags[i + 1 :]) for i in range(len(flags))
    )
    if eligible:
        return AlphaSearchResult(variable, max(eligible), reports, non_monotone)
    zero_failed = math.isclose(grid[0], 0.0) and not flags[0]
    if zero_failed:
        warnings.warn(
            f"{variable}: the unreduced master sample fails its own gates; "
            "the allocation or model configuration needs attention",
            stacklevel=2,
        )
    return AlphaSearchResult(variable, 0.0, reports, non_monotone, zero_failed=zero_failed)


def minimax_combine(alpha_stars: dict, master_total: int):
    """Most conservative per-variable optimum and the implied sample size."""
    if not alpha_stars:
        raise ValueError("need at least one per-variable optimum")
    alpha = min(alpha_stars.values())
    return alpha, round_half_even((1.0 - alpha) * master_total)


def run_reduction(
    population: SyntheticPopulation,
    master: Sample,
    truth_proxies: dict,                # variable -> {area: value}
    model_params: dict,                 # variable -> kwargs for the model
    targets: PrecisionTargets,
    thresholds: GateThresholds,
    seed: int,
    alpha_grid=DEFAULT_ALPHA_GRID,
) -> ReductionResult:
    """Per-variable searches, minimax combination, and the mandatory re-check.

    Eligibility at a small alpha does not logically imply eligibility at the
    combined (smaller) alpha when patterns are non-monotone, so each variable
    is re-evaluated at the final recommendation.
    """
    searches = {}
    for variable in model_params:
        searches[variable] = alpha_star_search(
            variable,
            alpha_grid,
            lambda a, v=variable: evaluate_gates(
                v, a, master, population, truth_proxies[v], model_params[v],
                targets, thresholds, seed,
            ),
        )
    alpha_stars = {v: s.alpha_star for v, s in searches.items()}
    alpha, n_reduced = minimax_combine(alpha_stars, master.allocation.total)
    recheck = {}
    for variable in model_params:
        existing = next(
            (r for r in searches[variable].reports if math.isclose(r.alpha, alpha)), None
        )
        recheck[variable] = existing or evaluate_gates(
            variable, alpha, master, population, truth_proxies[variable],
            model_params[variable], targets, thresholds, seed,
        )
    return ReductionResult(
        per_variable=searches,
        alpha_star=alpha,
        n_reduced=int(n_reduced),
        master_total=master.allocation.total,
        recheck=recheck,
        recheck_pass=all(r.eligible for r in recheck.values()),
    )


# ---------------------------------------------------------------------------
# Prior calibration
# ---------------------------------------------------------------------------


def default_s2_grid(data: AreaData, points: int = 7, span: float = 100.0) -> np.ndarray:
    """Log-spaced scale candidates centred on the between-stratum variance.

    The centre is a method-of-moments estimate of the BETWEEN-stratum
    variance component: the raw spread of the stratum-level estimates minus
    their average sampling contribution (delta-method on the logit scale for
    binary data, the known sampling variances for continuous data).
    """
    if data.kind == "binomial":
        p_hat = (data.successes + 0.5) / (data.trials + 1.0)
        raw = np.var(logit(p_hat))
        noise = np.mean(1.0 / (data.trials * p_hat * (1.0 - p_hat)))
    else:
        raw = np.var(data.direct)
        noise = np.mean(data.psi)
    centre = max(float(raw - noise), float(raw) / 100.0, 1e-8)
    return np.geomspace(centre / span, centre * span, points)


def prior_grid_search(
    variable: str,
    alpha_eval: float,
    master: Sample,
    population: SyntheticPopulation,
    truth_proxy: dict,
    model_params: dict,
    seed: int,
    nu_grid=DEFAULT_NU_GRID,
    s2_grid=None,
    nominal_coverage: float = 0.95,
    rhat_limit: float = 1.05,
) -> PriorGridResult:
    """Pick the effect-variance prior by fit quality at the evaluation fraction.

    Candidates need a converged fit (diagnostic within ``rhat_limit``) and at
    least nominal interval coverage over the national and domain areas; they
    are then ranked by mean domain error, with ties falling to the worst
    domain error and finally the tighter (smaller nu, then smaller s2) prior.
    When no candidate qualifies the best-covering one is returned with a
    fallback warning.
    """
    sub = nested_subsample(master, 1.0 - alpha_eval, alpha=alpha_eval)
    data = area_data_from_sample(population, sub, variable)
    if s2_grid is None:
        s2_grid = default_s2_grid(data)
    n_areas = 1 + sum(1 for a in truth_proxy if a[0] == "domain")
    threshold = math.ceil(nominal_coverage * n_areas)
    candidates = []
    for nu in nu_grid:
        for s2 in s2_grid:
            params = {**model_params, "nu": float(nu), "s2": float(s2)}
            params["seed"] = derive_stream(seed, "prior-grid", variable, nu, s2).integers(2**63)
            model = model_for(variable, params).fit(data)
            summary = model.summary_
            covered = sum(
                summary.covers(area, value) for area, value in truth_proxy.items()
            )
            nat_truth = truth_proxy[("national",)]
            ares = {
                area: abs(summary.mean_of(area) - value) / value
                for area, value in truth_proxy.items()
                if area[0] == "domain"
            }
            candidates.append(
                PriorCandidate(
                    nu=float(nu),
                    s2=float(s2),
                    coverage_count=int(covered),
                    n_areas=n_areas,
                    national_bias=(summary.mean_of(("national",)) - nat_truth) / nat_truth,
                    mare=float(np.mean(list(ares.values()))),
                    max_are=float(np.max(list(ares.values()))),
                    rhat_max=summary.rhat_max,
                )
            )
    qualifying = [
        c
        for c in candidates
        if c.coverage_count >= threshold and c.rhat_max <= rhat_limit
    ]
    fallback = not qualifying
    if fallback:
        warnings.warn(
            f"{variable}: no converged prior candidate reaches {threshold}/{n_areas} "
            "coverage; falling back to the best-covering candidate",
            stacklevel=2,
        )
        converged = [c for c in candidates if c.rhat_max <= rhat_limit] or candidates
        best_cov = max(c.coverage_count for c in converged)
        qualifying = [c for c in converged if c.coverage_count == best_cov]
    selected = min(qualifying, key=lambda c: (c.mare, c.max_are, c.nu, c.s2))
    return PriorGridResult(
        variable=variable,
        candidates=candidates,
        selected=(selected.nu, selected.s2),
        coverage_threshold=threshold,
        fallback=fallback,
    )
