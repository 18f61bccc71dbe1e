"""Config-driven end-to-end runs: synth -> baseline -> allocate -> reduce -> mc -> report.

Every stage reads its inputs from files written by earlier stages and writes
its own artifacts plus table CSVs, so any stage can be re-run in isolation.
A run manifest records seeds, stage timings, and content hashes of every
emitted file; with a fixed config and seed the artifact hashes are
reproducible bit for bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import allocation as alc
from . import mc as mcmod
from . import reduction as red
from ._util import derive_stream
from .hb import area_data_from_sample
from .popgen import (
    VARIABLES,
    PopulationConfig,
    load_population,
    save_population,
    synthesize,
)
from .sampling import (
    baseline_allocation,
    draw_stratified,
    nested_subsample,
    sample_manifest,
    summarize_baseline,
    Allocation,
    BaselineSummary,
)

TOOL_VERSION = "0.1.0"
_CSV_FLOAT = "%.17g"


class ConfigError(ValueError):
    """Bad or missing run configuration."""


class StageError(RuntimeError):
    """A pipeline stage could not run (usually a missing upstream artifact)."""


@dataclass
class HBSettings:
    chains: int = 3
    iterations: int = 2000
    burn_in: int = 1000
    tau2_beta: float = 1e6
    cv_method: str = "sd"
    rhat_limit: float = 1.05


@dataclass
class ReductionSettings:
    alpha_grid: tuple = red.DEFAULT_ALPHA_GRID
    national_are: float = 0.05
    domain_mare: float = 0.15
    domain_max_are: float = 0.50
    calibrate_priors: bool = True
    nu_grid: tuple = red.DEFAULT_NU_GRID
    s2_points: int = 7
    s2_span: float = 100.0


@dataclass
class MCSettings:
    replications: int = 100
    n_jobs: int = 1


@dataclass
class ReportSettings:
    min_cv_pass_rate: float = 0.90
    max_national_bias: float = 0.02


@dataclass
class RunConfig:
    population: PopulationConfig = field(default_factory=PopulationConfig)
    seed: int = 20260301
    baseline_fraction: float = 0.05
    national_cv: float = 0.03
    domain_cv: float = 0.08
    n_min: int = 2
    hb: HBSettings = field(default_factory=HBSettings)
    priors: dict = field(
        default_factory=lambda: {
            "employment": {"nu": 2.0, "s2": 0.06},
            "unemployment": {"nu": 2.0, "s2": 0.02},
            "hours": {"nu": 2.0, "s2": 1.0},
        }
    )
    reduction: ReductionSettings = field(default_factory=ReductionSettings)
    mc: MCSettings = field(default_factory=MCSettings)
    report: ReportSettings = field(default_factory=ReportSettings)

    def targets(self) -> alc.PrecisionTargets:
        return alc.default_targets(VARIABLES, self.national_cv, self.domain_cv)

    def thresholds(self) -> red.GateThresholds:
        r = self.reduction
        return red.GateThresholds(
            rhat_limit=self.hb.rhat_limit,
            national_are=r.national_are,
            domain_mare=r.domain_mare,
            domain_max_are=r.domain_max_are,
        )

    def model_params(self, priors: dict | None = None) -> dict:
        """Per-variable model constructor kwargs (seed filled in by callers)."""
        priors = priors if priors is not None else self.priors
        base = {
            "chains": self.hb.chains,
            "iterations": self.hb.iterations,
            "burn_in": self.hb.burn_in,
            "tau2_beta": self.hb.tau2_beta,
            "cv_method": self.hb.cv_method,
        }
        return {
            var: {**base, "nu": priors[var]["nu"], "s2": priors[var]["s2"]}
            for var in VARIABLES
        }

    def to_dict(self) -> dict:
        def plain(obj):
            if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
                return {k: plain(v) for k, v in dataclasses.asdict(obj).items()}
            if isinstance(obj, dict):
                return {k: plain(v) for k, v in obj.items()}
            if isinstance(obj, (tuple, list)):
                return [plain(v) for v in obj]
            return obj

        out = plain(self)
        out["population"] = self.population.to_dict()
        return out

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        raw = dict(raw)
        try:
            cfg = RunConfig()
            if "seed" in raw:
                cfg.seed = int(raw.pop("seed"))
            pop_raw = raw.pop("population", None)
            if pop_raw is not None:
                pop_raw = dict(pop_raw)
                pop_raw.setdefault("seed", cfg.seed)
                cfg.population = PopulationConfig.from_dict(pop_raw)
            else:
                cfg.population = dataclasses.replace(cfg.population, seed=cfg.seed)
            targets_raw = raw.pop("targets", {})
            cfg.national_cv = targets_raw.get("national_cv", cfg.national_cv)
            cfg.domain_cv = targets_raw.get("domain_cv", cfg.domain_cv)
            baseline_raw = raw.pop("baseline", {})
            cfg.baseline_fraction = baseline_raw.get("fraction", cfg.baseline_fraction)
            alloc_raw = raw.pop("allocation", {})
            cfg.n_min = alloc_raw.get("n_min", cfg.n_min)
            hb_raw = raw.pop("hb", {})
            cfg.hb = HBSettings(**{**dataclasses.asdict(cfg.hb), **hb_raw})
            priors_raw = raw.pop("priors", {})
            for var, spec in priors_raw.items():
                if var not in cfg.priors:
                    raise ConfigError(f"priors given for unknown variable {var!r}")
                cfg.priors[var].update(spec)
            red_raw = raw.pop("reduction", {})
            red_defaults = dataclasses.asdict(cfg.reduction)
            red_defaults.update(red_raw)
            red_defaults["alpha_grid"] = tuple(red_defaults["alpha_grid"])
            red_defaults["nu_grid"] = tuple(red_defaults["nu_grid"])
            cfg.reduction = ReductionSettings(**red_defaults)
            mc_raw = raw.pop("mc", {})
            cfg.mc = MCSettings(**{**dataclasses.asdict(cfg.mc), **mc_raw})
            report_raw = raw.pop("report", {})
            cfg.report = ReportSettings(**{**dataclasses.asdict(cfg.report), **report_raw})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if raw:
            raise ConfigError(f"unknown run config sections: {sorted(raw)}")
        cfg.population.validate()
        return cfg

    @staticmethod
    def from_toml(path) -> "RunConfig":
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        return RunConfig.from_dict(raw)


STAGES = ("synth", "baseline", "allocate", "reduce", "mc", "report")


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _config_digest(cfg: RunConfig) -> str:
    text = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


def _require(path: Path, needed_by: str, produced_by: str) -> Path:
    if not path.exists():
        raise StageError(
            f"stage '{needed_by}' needs {path.name}, which is missing; "
            f"run the '{produced_by}' stage first"
        )
    return path


def _write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _write_csv(path: Path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False, float_format=_CSV_FLOAT)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_synth(cfg: RunConfig, outdir: Path) -> list:
    population, truth = synthesize(cfg.population)
    save_population(population, truth, outdir / "population.csv", outdir / "population_meta.json")
    return ["population.csv", "population_meta.json"]


def _load_population(outdir: Path, stage: str):
    _require(outdir / "population.csv", stage, "synth")
    _require(outdir / "population_meta.json", stage, "synth")
    return load_population(outdir / "population.csv", outdir / "population_meta.json")


def stage_baseline(cfg: RunConfig, outdir: Path) -> list:
    population, _ = _load_population(outdir, "baseline")
    alloc = baseline_allocation(population, cfg.baseline_fraction)
    sample = draw_stratified(population, alloc, cfg.seed, label="baseline")
    summary = summarize_baseline(sample, population)
    _write_csv(outdir / "baseline_sample.csv", sample_manifest(sample))
    payload = {
        "fraction": cfg.baseline_fraction,
        "n0": summary.n0.tolist(),
        "neff": summary.neff.tolist(),
        "means": {v: summary.means[v].tolist() for v in VARIABLES},
        "sds": {v: summary.sds[v].tolist() for v in VARIABLES},
        "cov_means": {v: summary.cov_means[v].tolist() for v in VARIABLES},
    }
    _write_json(outdir / "baseline_summary.json", payload)
    return ["baseline_sample.csv", "baseline_summary.json"]


def _load_baseline(outdir: Path, stage: str) -> BaselineSummary:
    path = _require(outdir / "baseline_summary.json", stage, "baseline")
    with open(path) as fh:
        payload = json.load(fh)
    return BaselineSummary(
        n0=np.asarray(payload["n0"], dtype=np.int64),
        neff=np.asarray(payload["neff"], dtype=np.int64),
        means={v: np.asarray(payload["means"][v]) for v in VARIABLES},
        sds={v: np.asarray(payload["sds"][v]) for v in VARIABLES},
        cov_means={v: np.asarray(payload["cov_means"][v]) for v in VARIABLES},
    )


def stage_allocate(cfg: RunConfig, outdir: Path) -> list:
    population, _ = _load_population(outdir, "allocate")
    baseline = _load_baseline(outdir, "allocate")
    targets = cfg.targets()
    inputs = alc.build_variance_inputs(baseline, population, n_min=cfg.n_min)
    inputs.to_json(outdir / "problem.json", targets)

    neyman = {v: alc.neyman_allocation(inputs, v, targets=targets) for v in VARIABLES}
    nso = alc.nso_max_allocation(neyman)
    bethel = alc.bethel_solve(inputs, targets)

    frame = pd.DataFrame({"stratum": np.arange(inputs.n_strata)})
    for v in VARIABLES:
        frame[f"neyman_{v}"] = neyman[v].counts
    frame["nso_max"] = nso.counts
    frame["bethel"] = bethel.allocation.counts
    _write_csv(outdir / "allocations.csv", frame)

    _write_json(
        outdir / "bethel_solution.json",
        {
            "continuous": bethel.continuous.tolist(),
            "counts": bethel.allocation.counts.tolist(),
            "iterations": bethel.iterations,
            "cost": bethel.cost,
            "multipliers": {f"{v}/{d}": m for (v, d), m in bethel.multipliers.items()},
            "slacks": {f"{v}/{d}": s for (v, d), s in bethel.slacks.items()},
            "active": [f"{v}/{d}" for v, d in bethel.active],
        },
    )
    _write_json(
        outdir / "allocation_totals.json",
        {
            "neyman": {v: neyman[v].total for v in VARIABLES},
            "nso_max": nso.total,
            "bethel": bethel.allocation.total,
        },
    )

    rows = []
    for v in VARIABLES:
        ney_cvs = [alc.cv_of(neyman[v], inputs, v, d) for d in range(inputs.n_domains + 1)]
        nso_cvs = [alc.cv_of(nso, inputs, v, d) for d in range(inputs.n_domains + 1)]
        rows.append(
            {
                "variable": v,
                "neyman_national_cv": ney_cvs[0],
                "neyman_worst_domain_cv": max(ney_cvs[1:]),
                "nso_national_cv": nso_cvs[0],
                "nso_worst_domain_cv": max(nso_cvs[1:]),
                "national_target": targets.bound(v, 0),
                "domain_target": targets.bound(v, 1),
                "neyman_national_pass": ney_cvs[0] <= targets.bound(v, 0),
                "neyman_domain_pass": max(ney_cvs[1:]) <= targets.bound(v, 1),
                "nso_national_pass": nso_cvs[0] <= targets.bound(v, 0),
                "nso_domain_pass": max(nso_cvs[1:]) <= targets.bound(v, 1),
            }
        )
    _write_csv(outdir / "t2_neyman_nso_cv.csv", pd.DataFrame(rows))

    rows = []
    for v in VARIABLES:
        cvs = [alc.cv_of(bethel.allocation, inputs, v, d) for d in range(inputs.n_domains + 1)]
        worst = int(np.argmax(cvs[1:])) + 1
        rows.append(
            {
                "variable": v,
                "national_cv": cvs[0],
                "national_target": targets.bound(v, 0),
                "worst_domain_cv": cvs[worst],
                "worst_domain": worst,
                "domain_target": targets.bound(v, 1),
                "all_pass": cvs[0] <= targets.bound(v, 0)
                and max(cvs[1:]) <= targets.bound(v, 1),
            }
        )
    _write_csv(outdir / "t3_bethel_cv.csv", pd.DataFrame(rows))
    return [
        "problem.json",
        "allocations.csv",
        "bethel_solution.json",
        "allocation_totals.json",
        "t2_neyman_nso_cv.csv",
        "t3_bethel_cv.csv",
    ]


def _load_bethel_allocation(outdir: Path, stage: str) -> Allocation:
    path = _require(outdir / "allocations.csv", stage, "allocate")
    frame = pd.read_csv(path)
    return Allocation(frame["bethel"].to_numpy(np.int64), provenance="bethel")


def stage_reduce(cfg: RunConfig, outdir: Path) -> list:
    population, truth = _load_population(outdir, "reduce")
    bethel = _load_bethel_allocation(outdir, "reduce")
    targets = cfg.targets()
    thresholds = cfg.thresholds()
    master = draw_stratified(population, bethel, cfg.seed, label="reduce-master")
    _write_csv(outdir / "master_sample.csv", sample_manifest(master))
    proxies = {v: red.truth_map(truth, v) for v in VARIABLES}

    params = cfg.model_params()
    result = red.run_reduction(
        population, master, proxies, params, targets, thresholds, cfg.seed,
        alpha_grid=cfg.reduction.alpha_grid,
    )

    outputs = []
    priors_used = {v: dict(cfg.priors[v]) for v in VARIABLES}
    if cfg.reduction.calibrate_priors:
        grid_rows = []
        for v in VARIABLES:
            grid = red.prior_grid_search(
                v,
                result.alpha_star,
                master,
                population,
                proxies[v],
                params[v],
                cfg.seed,
                nu_grid=cfg.reduction.nu_grid,
                rhat_limit=cfg.hb.rhat_limit,
            )
            priors_used[v] = {"nu": grid.selected[0], "s2": grid.selected[1]}
            for c in grid.candidates:
                grid_rows.append(
                    {
                        "variable": v,
                        "nu": c.nu,
                        "s2": c.s2,
                        "coverage_count": c.coverage_count,
                        "n_areas": c.n_areas,
                        "national_bias": c.national_bias,
                        "mare": c.mare,
                        "max_are": c.max_are,
                        "rhat_max": c.rhat_max,
                        "selected": (c.nu, c.s2) == grid.selected,
                        "fallback": grid.fallback,
                    }
                )
        _write_csv(outdir / "prior_grid.csv", pd.DataFrame(grid_rows))
        outputs.append("prior_grid.csv")
        params = cfg.model_params(priors_used)
        result = red.run_reduction(
            population, master, proxies, params, targets, thresholds, cfg.seed,
            alpha_grid=cfg.reduction.alpha_grid,
        )

    gate_rows = [
        r.to_row() for v in VARIABLES for r in result.per_variable[v].reports
    ]
    _write_csv(outdir / "gate_reports.csv", pd.DataFrame(gate_rows))

    _write_json(
        outdir / "reduction.json",
        {
            "alpha_star": result.alpha_star,
            "n_reduced": result.n_reduced,
            "master_total": result.master_total,
            "per_variable": {
                v: {
                    "alpha_star": result.per_variable[v].alpha_star,
                    "n_reduced": int(
                        round((1 - result.per_variable[v].alpha_star) * result.master_total)
                    ),
                    "non_monotone": result.per_variable[v].non_monotone,
                    "zero_failed": result.per_variable[v].zero_failed,
                }
                for v in VARIABLES
            },
            "recheck": {v: result.recheck[v].to_row() for v in VARIABLES},
            "recheck_pass": result.recheck_pass,
            "priors": priors_used,
        },
    )

    totals_path = _require(outdir / "allocation_totals.json", "reduce", "allocate")
    with open(totals_path) as fh:
        totals = json.load(fh)
    t1 = pd.DataFrame(
        [
            {
                "variable": v,
                "neyman": totals["neyman"][v],
                "nso_max": totals["nso_max"],
                "bethel": totals["bethel"],
                "hb_combined": result.n_reduced,
            }
            for v in VARIABLES
        ]
    )
    _write_csv(outdir / "t1_sample_sizes.csv", t1)

    # single illustrative reduced sample: posterior CVs, accuracy, interval coverage
    sub = nested_subsample(master, 1.0 - result.alpha_star, alpha=result.alpha_star)
    t4_rows, t5_rows = [], []
    for v in VARIABLES:
        data = area_data_from_sample(population, sub, v)
        seed_v = derive_stream(cfg.seed, "gates", v, result.alpha_star).integers(2**63)
        model = red.model_for(v, {**params[v], "seed": int(seed_v)}).fit(data)
        summary = model.summary_
        areas = [("national",)] + [("domain", d) for d in range(1, truth.n_domains + 1)]
        cvs = [summary.cv_of(a) for a in areas]
        worst = int(np.argmax([c / targets.bound(v, 0 if a[0] == "national" else a[1]) for c, a in zip(cvs, areas)]))
        t4_rows.append(
            {
                "variable": v,
                "national_cv": cvs[0],
                "national_target": targets.bound(v, 0),
                "worst_domain_cv": max(cvs[1:]),
                "domain_target": targets.bound(v, 1),
                "rhat_max": summary.rhat_max,
                "all_pass": cvs[0] <= targets.bound(v, 0)
                and max(cvs[1:]) <= targets.bound(v, 1),
            }
        )
        truths = truth.area_truths(v)
        means = np.array([summary.mean_of(a) for a in areas])
        rel = (means - truths) / truths
        covered = sum(summary.covers(a, t) for a, t in zip(areas, truths))
        t5_rows.append(
            {
                "variable": v,
                "national_rel_bias": rel[0],
                "domain_mare": np.abs(rel[1:]).mean(),
                "domain_max_are": np.abs(rel[1:]).max(),
                "cases_covered": covered,
                "n_areas": len(areas),
                "empirical_coverage": covered / len(areas),
            }
        )
        _write_json(outdir / f"fit_report_{v}.json", summary.to_dict())
        outputs.append(f"fit_report_{v}.json")
    _write_csv(outdir / "t4_hb_cv.csv", pd.DataFrame(t4_rows))
    _write_csv(outdir / "t5_hb_accuracy.csv", pd.DataFrame(t5_rows))

    return [
        "master_sample.csv",
        "gate_reports.csv",
        "reduction.json",
        "t1_sample_sizes.csv",
        "t4_hb_cv.csv",
        "t5_hb_accuracy.csv",
        *outputs,
    ]


def stage_mc(cfg: RunConfig, outdir: Path) -> list:
    population, truth = _load_population(outdir, "mc")
    bethel = _load_bethel_allocation(outdir, "mc")
    path = _require(outdir / "reduction.json", "mc", "reduce")
    with open(path) as fh:
        reduction_payload = json.load(fh)
    priors = reduction_payload["priors"]
    config = mcmod.MCConfig(
        population=population,
        truth=truth,
        master_allocation=bethel,
        alpha=reduction_payload["alpha_star"],
        model_params=cfg.model_params(priors),
        targets=cfg.targets(),
        rhat_limit=cfg.hb.rhat_limit,
        replications=cfg.mc.replications,
        base_seed=cfg.seed,
        n_jobs=cfg.mc.n_jobs,
    )
    result = mcmod.run_mc(config)
    _write_csv(outdir / "mc_records.csv", mcmod.records_frame(result.records))

    summary = pd.DataFrame(
        [
            {
                "variable": v,
                "replications": result.n_replications,
                "used": result.n_used[v],
                "failure_rate": result.failure_rate[v],
                "coverage_share_mean": result.coverage_share_mean[v],
                "coverage_share_sd": result.coverage_share_sd[v],
                "national_bias_mean": result.national_bias_mean[v],
                "domain_mare": result.domain_mare[v],
                "domain_max_are_mean": result.domain_max_are_mean[v],
                "cv_pass_rate": result.cv_pass_rate[v],
            }
            for v in result.variables
        ]
    )
    _write_csv(outdir / "mc_summary.csv", summary)

    _write_csv(
        outdir / "t6_mc_accuracy.csv",
        summary[["variable", "national_bias_mean", "domain_mare", "domain_max_are_mean"]],
    )
    _write_csv(
        outdir / "t7_mc_coverage.csv",
        summary[["variable", "coverage_share_mean", "coverage_share_sd"]],
    )
    _write_csv(
        outdir / "t8_cv_pass.csv",
        summary[["variable", "cv_pass_rate", "failure_rate"]],
    )
    return [
        "mc_records.csv",
        "mc_summary.csv",
        "t6_mc_accuracy.csv",
        "t7_mc_coverage.csv",
        "t8_cv_pass.csv",
    ]


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def run_checks(cfg: RunConfig, outdir: Path) -> list:
    """Configured pass/fail checks over the emitted artifacts."""
    checks = []
    t3 = pd.read_csv(_require(outdir / "t3_bethel_cv.csv", "report", "allocate"))
    checks.append(
        ("bethel satisfies every CV constraint", bool(t3["all_pass"].all()))
    )
    with open(_require(outdir / "reduction.json", "report", "reduce")) as fh:
        reduction_payload = json.load(fh)
    checks.append(
        ("all gates pass at the combined reduction", bool(reduction_payload["recheck_pass"]))
    )
    t4 = pd.read_csv(_require(outdir / "t4_hb_cv.csv", "report", "reduce"))
    checks.append(
        ("reduced-sample posterior CVs meet every target", bool(t4["all_pass"].all()))
    )
    summary = pd.read_csv(_require(outdir / "mc_summary.csv", "report", "mc"))
    checks.append(
        (
            f"CV-gate pass rate >= {cfg.report.min_cv_pass_rate:.0%} per variable",
            bool((summary["cv_pass_rate"] >= cfg.report.min_cv_pass_rate).all()),
        )
    )
    checks.append(
        (
            f"absolute national bias <= {cfg.report.max_national_bias:.0%} per variable",
            bool(
                (summary["national_bias_mean"].abs() <= cfg.report.max_national_bias).all()
            ),
        )
    )
    return checks


def _markdown_table(frame: pd.DataFrame, highlight: dict | None = None) -> str:
    frame = frame.copy()
    for col in frame.columns:
        if frame[col].dtype == float:
            frame[col] = frame[col].map(lambda x: f"{x:.4g}")
    if highlight:
        for (row, col) in highlight:
            frame.loc[row, col] = f"**{frame.loc[row, col]}**"
    header = "| " + " | ".join(frame.columns) + " |"
    rule = "| " + " | ".join("---" for _ in frame.columns) + " |"
    body = ["| " + " | ".join(str(v) for v in row) + " |" for row in frame.to_numpy()]
    return "\n".join([header, rule, *body])


def stage_report(cfg: RunConfig, outdir: Path, strict: bool = False) -> list:
    manifest_path = outdir / "run_manifest.json"
    if not manifest_path.exists():
        raise StageError("report needs run_manifest.json; run the pipeline first")
    try:
        with open(manifest_path) as fh:
            json.load(fh)
    except json.JSONDecodeError as exc:
        raise StageError(f"run manifest is corrupt: {exc}") from exc

    tables = [
        ("t1_sample_sizes.csv", "Total sample sizes by allocation strategy"),
        ("t2_neyman_nso_cv.csv", "CVs under per-variable and element-wise maximum allocations"),
        ("t3_bethel_cv.csv", "CVs under the minimum-cost allocation"),
        ("t4_hb_cv.csv", "Posterior CVs at the reduced sample"),
        ("t5_hb_accuracy.csv", "Accuracy and interval coverage, single reduced sample"),
        ("t6_mc_accuracy.csv", "Monte Carlo accuracy of the reduced-sample estimates"),
        ("t7_mc_coverage.csv", "Monte Carlo credible-interval coverage"),
        ("t8_cv_pass.csv", "Monte Carlo CV-gate pass rate"),
    ]
    lines = ["# Run report", ""]
    checks = run_checks(cfg, outdir)
    lines.append("## Checks")
    lines.append("")
    for label, ok in checks:
        lines.append(f"- {'PASS' if ok else 'FAIL'}: {label}")
    lines.append("")
    for filename, title in tables:
        path = _require(outdir / filename, "report", "pipeline")
        frame = pd.read_csv(path)
        highlight = {}
        if filename == "t2_neyman_nso_cv.csv":
            for idx, row in frame.iterrows():
                for metric, flag in [
                    ("neyman_national_cv", "neyman_national_pass"),
                    ("neyman_worst_domain_cv", "neyman_domain_pass"),
                    ("nso_national_cv", "nso_national_pass"),
                    ("nso_worst_domain_cv", "nso_domain_pass"),
                ]:
                    if not row[flag]:
                        highlight[(idx, metric)] = True
        lines.append(f"## {title} ({filename})")
        lines.append("")
        lines.append(_markdown_table(frame, highlight))
        lines.append("")
    (outdir / "report.md").write_text("\n".join(lines))
    if strict and not all(ok for _, ok in checks):
        raise StageError("strict report: at least one acceptance check failed")
    return ["report.md"]


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

_STAGE_FUNCS = {
    "synth": stage_synth,
    "baseline": stage_baseline,
    "allocate": stage_allocate,
    "reduce": stage_reduce,
    "mc": stage_mc,
}


def run_stage(cfg: RunConfig, outdir, stage: str, strict: bool = False) -> dict:
    """Run one stage and return its manifest entry."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if stage == "report":
        outputs = stage_report(cfg, outdir, strict=strict)
    elif stage in _STAGE_FUNCS:
        outputs = _STAGE_FUNCS[stage](cfg, outdir)
    else:
        raise ConfigError(f"unknown stage {stage!r}; valid stages: {', '.join(STAGES)}")
    seconds = time.perf_counter() - start
    return {
        "name": stage,
        "seconds": seconds,
        "outputs": {name: _digest(outdir / name) for name in sorted(outputs)},
    }


def run_pipeline(cfg: RunConfig, outdir, stages=STAGES, strict: bool = False) -> dict:
    """Run the requested stages in order and update the run manifest.

    Re-running a single stage against an existing run directory replaces just
    that stage's manifest entry, so stage-level reruns keep a complete file
    inventory.  A failing stage is recorded in the manifest before the error
    propagates; its partial outputs stay on disk for inspection.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tool_version": TOOL_VERSION,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_digest": _config_digest(cfg),
        "stages": [],
    }
    prior = _read_manifest(outdir)
    if prior is not None and prior.get("config_digest") == manifest["config_digest"]:
        manifest["stages"] = list(prior.get("stages", []))
    ran_earlier_stage = False
    for stage in stages:
        if stage == "report" and ran_earlier_stage:
            _write_manifest(outdir, manifest)
        try:
            entry = run_stage(cfg, outdir, stage, strict=strict)
        except StageError as exc:
            if stage != "report":
                _record_stage(manifest, {"name": stage, "failed": True, "error": str(exc)})
                _write_manifest(outdir, manifest)
            raise
        _record_stage(manifest, entry)
        if stage != "report":
            ran_earlier_stage = True
    _write_manifest(outdir, manifest)
    return manifest


def _record_stage(manifest: dict, entry: dict) -> None:
    manifest["stages"] = [s for s in manifest["stages"] if s["name"] != entry["name"]]
    manifest["stages"].append(entry)
    manifest["stages"].sort(key=lambda s: STAGES.index(s["name"]))


def _read_manifest(outdir: Path):
    path = outdir / "run_manifest.json"
    if not path.exists():
        return None
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError:
        return None


def _write_manifest(outdir: Path, manifest: dict) -> None:
    _write_json(outdir / "run_manifest.json", manifest)
