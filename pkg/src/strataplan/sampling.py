"""Stratified simple random sampling, nested sub-sampling, and baseline summaries.

Every sampled unit carries a persistent uniform key drawn at selection time;
a sub-sample at fraction f keeps the f-smallest keys per stratum, which makes
nesting across any ladder of fractions exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from ._util import derive_stream, round_half_even
from .popgen import VARIABLES, SyntheticPopulation


@dataclass(frozen=True)
class Allocation:
    """Per-stratum integer sample sizes with provenance."""

    counts: np.ndarray
    provenance: str

    def __post_init__(self):
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))
        if np.any(self.counts < 0):
            raise ValueError("allocation counts must be >= 0")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def validate_against(self, stratum_sizes: np.ndarray) -> None:
        over = np.flatnonzero(self.counts > stratum_sizes)
        if len(over):
            raise ValueError(
                f"allocation exceeds stratum size in strata {over.tolist()}"
            )


@dataclass(frozen=True)
class Sample:
    """Selected units grouped by stratum, each with its selection key.

    Units within a stratum are stored in increasing key order, so the first
    m entries of a stratum are exactly the fraction-(m/n_h) nested sub-sample.
    """

    units: tuple            # per stratum: np.ndarray of unit ids
    keys: tuple             # per stratum: np.ndarray of uniform keys, ascending
    allocation: Allocation
    seed_lineage: str
    notes: tuple = ()

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(u) for u in self.units], dtype=np.int64)

    @property
    def n_strata(self) -> int:
        return len(self.units)


@dataclass(frozen=True)
class BaselineSummary:
    """Per-stratum, per-variable moments from the baseline sample."""

    n0: np.ndarray
    neff: np.ndarray
    means: dict             # variable -> (H,)
    sds: dict               # variable -> (H,)
    cov_means: dict         # variable -> (H, 2)


def baseline_allocation(population: SyntheticPopulation, fraction: float) -> Allocation:
    """Fixed-fraction allocation with a floor of two units per stratum."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    sizes = population.strata.sizes
    small = np.flatnonzero(sizes < 2)
    if len(small):
        raise ValueError(
            f"strata {small.tolist()} have fewer than 2 units; baseline needs >= 2"
        )
    counts = np.maximum(2, round_half_even(fraction * sizes))
    counts = np.minimum(counts, sizes)
    return Allocation(counts, provenance="baseline")


def draw_stratified(
    population: SyntheticPopulation, allocation: Allocation, seed: int, label: str = "sample"
) -> Sample:
    """Draw a stratified simple random sample without replacement.

    Each stratum uses its own derived stream, so draws are reproducible and
    independent of any parallel schedule.
    """
    strata = population.strata
    allocation.validate_against(strata.sizes)
    units, keys = [], []
    for h in range(strata.n_strata):
        n_h = int(allocation.counts[h])
        if n_h == 0:
            units.append(np.empty(0, dtype=np.int64))
            keys.append(np.empty(0))
            continue
        rng = derive_stream(seed, label, "stratum", h)
        chosen = rng.choice(int(strata.sizes[h]), size=n_h, replace=False)
        unit_ids = strata.starts[h] + np.sort(chosen)
        unit_keys = rng.random(n_h)
        order = np.argsort(unit_keys, kind="stable")
        units.append(unit_ids[order])
        keys.append(unit_keys[order])
    return Sample(
        units=tuple(units),
        keys=tuple(keys),
        allocation=allocation,
        seed_lineage=f"{seed}/{label}",
    )


def effective_sample_size(n_h: int, big_n_h: int, deff_h: float) -> int:
    """Design-effect-deflated sample size with finite population correction."""
    if not 1 <= n_h <= big_n_h:
        raise ValueError(f"need 1 <= n_h <= N_h, got n_h={n_h}, N_h={big_n_h}")
    if deff_h < 1:
        raise ValueError(f"design effect must be >= 1, got {deff_h}")
    eff = round_half_even(n_h * (1 - n_h / big_n_h) / deff_h)
    return max(1, int(eff))


def nested_subsample(master: Sample, fraction: float, alpha: float | None = None) -> Sample:
    """Keep the fraction-f smallest-key units of every stratum of ``master``.

    Output strata are subsets of the master's, and sub-samples at decreasing
    fractions nest within each other.  A stratum that would round to zero
    units is floored at one and noted.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    notes = []
    units, keys, counts = [], [], []
    for h in range(master.n_strata):
        n_h = len(master.units[h])
        m = round_half_even(fraction * n_h)
        if n_h > 0 and m == 0:
            notes.append(f"stratum {h}: subsample floored at 1 unit")
            m = 1
        m = min(m, n_h)
        units.append(master.units[h][:m])
        keys.append(master.keys[h][:m])
        counts.append(m)
    if alpha is None:
        alpha = 1.0 - fraction
    return Sample(
        units=tuple(units),
        keys=tuple(keys),
        allocation=Allocation(np.array(counts), provenance=f"hb_reduced({alpha:g})"),
        seed_lineage=master.seed_lineage + f"/sub({fraction:g})",
        notes=tuple(notes),
    )


def summarize_baseline(sample: Sample, population: SyntheticPopulation) -> BaselineSummary:
    """Stratum means, SDs (n-1 denominator), and effective sizes from a sample."""
    strata = population.strata
    counts = sample.counts
    thin = np.flatnonzero(counts < 2)
    if len(thin):
        raise ValueError(
            f"strata {thin.tolist()} have fewer than 2 sampled units; cannot summarise"
        )
    means = {v: np.empty(strata.n_strata) for v in VARIABLES}
    sds = {v: np.empty(strata.n_strata) for v in VARIABLES}
    cov_means = {v: np.empty((strata.n_strata, 2)) for v in VARIABLES}
    for h in range(strata.n_strata):
        idx = sample.units[h]
        for v in VARIABLES:
            vals = population.values(v)[idx].astype(float)
            means[v][h] = vals.mean()
            sds[v][h] = vals.std(ddof=1)
            cov_means[v][h] = population.covariates[v][idx].mean(axis=0)
    neff = np.array(
        [
            effective_sample_size(int(counts[h]), int(strata.sizes[h]), float(strata.deff[h]))
            for h in range(strata.n_strata)
        ],
        dtype=np.int64,
    )
    return BaselineSummary(n0=counts, neff=neff, means=means, sds=sds, cov_means=cov_means)


def sample_manifest(sample: Sample) -> pd.DataFrame:
    """Flat unit listing (unit_id, stratum, key) for external nesting audits."""
    rows = {
        "unit_id": np.concatenate(sample.units) if sample.n_strata else np.empty(0, np.int64),
        "stratum": np.repeat(np.arange(sample.n_strata), sample.counts),
        "key": np.concatenate(sample.keys) if sample.n_strata else np.empty(0),
    }
    return pd.DataFrame(rows)
