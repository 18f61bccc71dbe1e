"""Survey sample allocation under multivariate CV constraints, plus
model-assisted reduction of the resulting sample with a Monte Carlo
validation harness."""

from .allocation import (
    BethelAllocator,
    BethelSolution,
    PrecisionTargets,
    VarianceInputs,
    all_cvs,
    bethel_solve,
    build_variance_inputs,
    cv_of,
    default_targets,
    deff_cluster,
    neyman_allocation,
    nso_max_allocation,
    preserve_deff_reduction,
    variance_of_total,
)
from .estimators import DirectEstimate, direct_estimates, stratum_direct
from .hb import (
    AreaData,
    BinomialLogitModel,
    FayHerriotModel,
    PosteriorDraws,
    PosteriorSummary,
    aggregate_domains,
    area_data_from_sample,
    gelman_rubin,
    hb_cv,
    mcse_mean,
)
from .mc import MCConfig, MCResult, ReplicationRecord, aggregate, run_mc, run_replication
from .pipeline import RunConfig, run_pipeline, run_stage
from .popgen import (
    PopulationConfig,
    SyntheticPopulation,
    TruthRegistry,
    load_population,
    save_population,
    synthesize,
)
from .reduction import (
    AlphaSearchResult,
    GateReport,
    GateThresholds,
    PriorGridResult,
    ReductionResult,
    alpha_star_search,
    evaluate_gates,
    minimax_combine,
    prior_grid_search,
    run_reduction,
    truth_map,
)
from .sampling import (
    Allocation,
    BaselineSummary,
    Sample,
    baseline_allocation,
    draw_stratified,
    effective_sample_size,
    nested_subsample,
    summarize_baseline,
)

__version__ = "0.1.0"
