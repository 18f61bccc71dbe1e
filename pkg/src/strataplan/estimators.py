"""Design-based stratum, domain, and national estimates with design variances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .popgen import VARIABLES, SyntheticPopulation
from .sampling import Sample


@dataclass(frozen=True)
class DirectEstimate:
    variable: str
    area: tuple                    # ("national",) | ("domain", d) | ("stratum", h)
    mean: float
    total: float
    variance: float                # variance of the estimated total
    cv: float
    n: int
    degenerate: bool = False


def stratum_direct(sample: Sample, population: SyntheticPopulation, variable: str):
    """Stratum means and sampling variances of the stratum means.

    psi_h = DEFF_h * (1 - f_h) * S^2_h / n_h with S^2 the n-1 sample variance.
    Single-unit strata cannot estimate S^2; they are flagged and given the
    average variance of the clean strata so downstream model fits stay usable.

    Returns (theta_hat, psi, n, degenerate_mask), each length H.
    """
    strata = population.strata
    counts = sample.counts
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise ValueError(f"strata {empty.tolist()} have no sampled units")
    values = population.values(variable)
    theta = np.empty(strata.n_strata)
    s2 = np.zeros(strata.n_strata)
    degenerate = counts < 2
    for h in range(strata.n_strata):
        obs = values[sample.units[h]].astype(float)
        theta[h] = obs.mean()
        if counts[h] >= 2:
            s2[h] = obs.var(ddof=1)
    if degenerate.any():
        clean = ~degenerate
        if not clean.any():
            raise ValueError("every stratum is degenerate; cannot form variances")
        s2[degenerate] = s2[clean].mean()
    f = counts / strata.sizes
    psi = strata.deff * (1 - f) * s2 / counts
    return theta, psi, counts.copy(), degenerate


def direct_estimates(
    sample: Sample, population: SyntheticPopulation, variables=VARIABLES
) -> dict:
    """All direct estimates keyed by (variable, area).

    Domain and national figures are N_h-weighted combinations of the stratum
    means, with variances summed across the independent strata.
    """
    strata = population.strata
    out = {}
    for var in variables:
        theta, psi, n, degenerate = stratum_direct(sample, population, var)
        sizes = strata.sizes.astype(float)
        var_total_h = sizes**2 * psi
        total_h = sizes * theta
        for h in range(strata.n_strata):
            out[(var, ("stratum", h))] = _estimate(
                var, ("stratum", h), theta[h], total_h[h], var_total_h[h], int(n[h]), bool(degenerate[h])
            )
        for d in range(1, strata.n_domains + 1):
            mask = strata.domain_of == d - 1
            out[(var, ("domain", d))] = _estimate(
                var,
                ("domain", d),
                total_h[mask].sum() / sizes[mask].sum(),
                total_h[mask].sum(),
                var_total_h[mask].sum(),
                int(n[mask].sum()),
                bool(degenerate[mask].any()),
            )
        out[(var, ("national",))] = _estimate(
            var,
            ("national",),
            total_h.sum() / sizes.sum(),
            total_h.sum(),
            var_total_h.sum(),
            int(n.sum()),
            bool(degenerate.any()),
        )
    return out


def _estimate(var, area, mean, total, variance, n, degenerate) -> DirectEstimate:
    cv = float(np.sqrt(variance) / total) if total > 0 else float("inf")
    return DirectEstimate(
        variable=var,
        area=area,
        mean=float(mean),
        total=float(total),
        variance=float(variance),
        cv=cv,
        n=n,
        degenerate=degenerate,
    )


def estimates_frame(estimates: dict) -> pd.DataFrame:
    """Tabular view of direct estimates (one row per variable and area)."""
    rows = []
    for (var, area), est in estimates.items():
        rows.append(
            {
                "variable": var,
                "area": "national" if area[0] == "national" else f"{area[0]}_{area[1]}",
                "mean": est.mean,
                "total": est.total,
                "variance": est.variance,
                "cv": est.cv,
                "n": est.n,
                "degenerate": est.degenerate,
            }
        )
    return pd.DataFrame(rows)
