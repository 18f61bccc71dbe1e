"""Repeated-sampling evaluation of the reduced-sample model estimates.

Each replication draws a fresh master sample under the fixed allocation,
extracts the nested reduced sub-sample, fits the per-variable models, and
records interval coverage, relative errors, and the all-domain CV indicator.
Replication seeds derive from (base seed, replication index), so results are
independent of execution order and parallelism width.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ._util import derive_stream
from .allocation import PrecisionTargets
from .popgen import SyntheticPopulation, TruthRegistry
from .reduction import model_for
from .sampling import Allocation, draw_stratified, nested_subsample
from .hb import area_data_from_sample


@dataclass
class MCConfig:
    population: SyntheticPopulation
    truth: TruthRegistry
    master_allocation: Allocation
    alpha: float
    model_params: dict              # variable -> model kwargs
    targets: PrecisionTargets
    rhat_limit: float = 1.05
    replications: int = 100
    base_seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if not 0 <= self.alpha < 1:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")


@dataclass
class ReplicationRecord:
    """Outcome of one (replication, variable) model fit over all areas."""

    replication: int
    variable: str
    rhat_max: float
    converged: bool
    covered: np.ndarray             # (D+1,) bool, [national, domain 1..D]
    rel_err: np.ndarray             # (D+1,) signed relative errors
    cv: np.ndarray                  # (D+1,)
    cv_pass: bool
    note: str = ""

    @property
    def are(self) -> np.ndarray:
        return np.abs(self.rel_err)


@dataclass
class MCResult:
    """Aggregates over usable (converged) replications.

    ``coverage[var]`` follows the area order [national, domain 1..D]; the
    domain error summary averages over domains only.  Replications whose fit
    failed the convergence limit are excluded from the model-quality
    aggregates and reported through ``failure_rate``.
    """

    variables: tuple
    n_replications: int
    n_used: dict
    coverage: dict                  # variable -> (D+1,)
    coverage_share_mean: dict
    coverage_share_sd: dict
    national_bias_mean: dict
    domain_mare: dict
    domain_max_are_mean: dict
    cv_pass_rate: dict
    failure_rate: dict
    records: list = field(default_factory=list)


def run_replication(b: int, config: MCConfig) -> list:
    """One full draw -> subsample -> fit cycle; returns one record per variable."""
    seed_b = int(derive_stream(config.base_seed, "mc", "rep", b).integers(2**63))
    master = draw_stratified(
        config.population, config.master_allocation, seed_b, label="mc-master"
    )
    sub = nested_subsample(master, 1.0 - config.alpha, alpha=config.alpha)
    n_domains = config.truth.n_domains
    areas = [("national",)] + [("domain", d) for d in range(1, n_domains + 1)]
    records = []
    for variable, params in config.model_params.items():
        truths = config.truth.area_truths(variable)
        try:
            data = area_data_from_sample(config.population, sub, variable)
            model_seed = int(
                derive_stream(config.base_seed, "mc", "fit", b, variable).integers(2**63)
            )
            model = model_for(variable, {**params, "seed": model_seed}).fit(data)
        except Exception as exc:
            records.append(
                ReplicationRecord(
                    replication=b,
                    variable=variable,
                    rhat_max=float("inf"),
                    converged=False,
                    covered=np.zeros(n_domains + 1, dtype=bool),
                    rel_err=np.full(n_domains + 1, np.nan),
                    cv=np.full(n_domains + 1, np.nan),
                    cv_pass=False,
                    note=f"model fit failed: {exc}",
                )
            )
            continue
        summary = model.summary_
        means = np.array([summary.mean_of(a) for a in areas])
        cv = np.array([summary.cv_of(a) for a in areas])
        covered = np.array(
            [summary.covers(a, t) for a, t in zip(areas, truths)], dtype=bool
        )
        bounds = np.array(
            [config.targets.bound(variable, 0 if a[0] == "national" else a[1]) for a in areas]
        )
        records.append(
            ReplicationRecord(
                replication=b,
                variable=variable,
                rhat_max=summary.rhat_max,
                converged=summary.rhat_max <= config.rhat_limit,
                covered=covered,
                rel_err=(means - truths) / truths,
                cv=cv,
                cv_pass=bool(np.all(cv <= bounds)),
            )
        )
    return records


_WORKER_CONFIG: MCConfig | None = None


def _worker(b: int) -> list:
    return run_replication(b, _WORKER_CONFIG)


def run_mc(config: MCConfig) -> MCResult:
    """Run all replications (optionally in parallel) and aggregate."""
    if config.n_jobs <= 1:
        nested = [run_replication(b, config) for b in range(config.replications)]
    else:
        global _WORKER_CONFIG
        _WORKER_CONFIG = config
        try:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(config.n_jobs) as pool:
                nested = pool.map(_worker, range(config.replications))
        finally:
            _WORKER_CONFIG = None
    records = [rec for group in nested for rec in group]
    return aggregate(records)


def aggregate(records: list) -> MCResult:
    """Fold replication records into the summary statistics.

    Per-area coverage is the mean of the coverage indicators; the domain
    error figure averages every (replication, domain) error with domains
    only; the CV pass rate is the share of replications where every area
    meets its bound simultaneously.
    """
    if not records:
        raise ValueError("no replication records to aggregate")
    records = sorted(records, key=lambda r: (r.replication, r.variable))
    variables = tuple(dict.fromkeys(r.variable for r in records))
    n_reps = len({r.replication for r in records})
    out = MCResult(
        variables=variables,
        n_replications=n_reps,
        n_used={},
        coverage={},
        coverage_share_mean={},
        coverage_share_sd={},
        national_bias_mean={},
        domain_mare={},
        domain_max_are_mean={},
        cv_pass_rate={},
        failure_rate={},
        records=records,
    )
    for var in variables:
        var_records = [r for r in records if r.variable == var]
        used = [r for r in var_records if r.converged]
        out.failure_rate[var] = 1.0 - len(used) / len(var_records)
        out.n_used[var] = len(used)
        if not used:
            for table in (
                out.coverage, out.coverage_share_mean, out.coverage_share_sd,
                out.national_bias_mean, out.domain_mare, out.domain_max_are_mean,
                out.cv_pass_rate,
            ):
                table[var] = np.nan
            continue
        covered = np.stack([r.covered for r in used])            # (B, D+1)
        rel_err = np.stack([r.rel_err for r in used])
        out.coverage[var] = covered.mean(axis=0)
        shares = covered.mean(axis=1)
        out.coverage_share_mean[var] = float(shares.mean())
        out.coverage_share_sd[var] = float(shares.std(ddof=1)) if len(used) > 1 else 0.0
        out.national_bias_mean[var] = float(rel_err[:, 0].mean())
        out.domain_mare[var] = float(np.abs(rel_err[:, 1:]).mean())
        out.domain_max_are_mean[var] = float(np.abs(rel_err[:, 1:]).max(axis=1).mean())
        out.cv_pass_rate[var] = float(np.mean([r.cv_pass for r in used]))
    return out


def records_frame(records: list) -> pd.DataFrame:
    """Long-format raw export: one row per (replication, variable, area)."""
    rows = []
    for rec in records:
        n_areas = len(rec.covered)
        for j in range(n_areas):
            area = "national" if j == 0 else f"domain_{j}"
            rows.append(
                {
                    "replication": rec.replication,
                    "variable": rec.variable,
                    "area": area,
                    "covered": bool(rec.covered[j]),
                    "are": abs(rec.rel_err[j]),
                    "rel_err": rec.rel_err[j],
                    "cv": rec.cv[j],
                    "cv_pass": rec.cv_pass,
                    "rhat_max": rec.rhat_max,
                    "converged": rec.converged,
                }
            )
    return pd.DataFrame(rows)


def records_from_frame(frame: pd.DataFrame) -> list:
    """Rebuild records from the raw export (inverse of records_frame)."""
    records = []
    for (b, var), group in frame.groupby(["replication", "variable"], sort=True):
        group = group.copy()
        group["order"] = group["area"].map(
            lambda a: 0 if a == "national" else int(a.split("_")[1])
        )
        group = group.sort_values("order")
        records.append(
            ReplicationRecord(
                replication=int(b),
                variable=str(var),
                rhat_max=float(group["rhat_max"].iloc[0]),
                converged=bool(group["converged"].iloc[0]),
                covered=group["covered"].to_numpy(bool),
                rel_err=group["rel_err"].to_numpy(float),
                cv=group["cv"].to_numpy(float),
                cv_pass=bool(group["cv_pass"].iloc[0]),
            )
        )
    return records
