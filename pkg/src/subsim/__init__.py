"""Subset simulation and branching subset simulation for small exceedance
probabilities and multimodal global optimisation."""

from .model import (
    ConfigurationError,
    CountedPerformanceFunction,
    DimensionMismatchError,
    EstimateUndefinedError,
    EvaluatedSample,
    InputModel,
    Level,
    RegionClause,
    RegionConstraint,
    RngStream,
    SeedViolationError,
    WHOLE_SPACE,
    evaluate,
    region_contains,
    sample_prior,
)
from .mcmc import ChainTarget, ProposalSpec, modified_metropolis_step, run_chain
from .sus import (
    ProbabilityEstimate,
    StopCondition,
    SusConfig,
    SusRun,
    cov_dmc,
    cov_mcmc,
    estimate_gamma,
    run_sus,
    select_threshold,
    sus_cov,
    sus_probability_estimate,
)
from .cgp import (
    ConvexGraphPartitioner,
    ConvexityGraph,
    GraphBudget,
    LinearClassifier,
    Partition,
    SingleSetPartitioner,
    alp,
    build_convexity_graph,
    cgp_partition,
    estimate_convexity_measure,
    graph_sample_count,
    train_lsvc,
)
from .bsus import (
    BranchNode,
    BranchTree,
    ChooseStrategy,
    allocate_chains,
    bsus_cov,
    bsus_probability_estimate,
    run_bsus,
    sample_conditional,
    tree_to_dict,
    trim_tree,
)
from .benchmarks import (
    Benchmark,
    BENCHMARKS,
    ExperimentConfig,
    ExperimentReport,
    benchmark_by_name,
    dmc_estimate,
    himmelblau,
    maxima_found,
    msle,
    piecewise_linear,
    run_experiment,
    with_dummy_dims,
)

__version__ = "0.1.0"
