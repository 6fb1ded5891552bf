"""Benchmark performance functions, direct Monte Carlo references, quality
metrics and the replicated experiment protocol.

Performance functions follow the convention that larger values are rarer:
exceedance regions are superlevel sets {g >= b} and optimisation benchmarks
have their objective negated so the maxima sit at zero.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .bsus import ChooseStrategy, bsus_cov, bsus_probability_estimate, run_bsus
from .cgp import ConvexGraphPartitioner
from .mcmc import ProposalSpec
from .model import (
    ConfigurationError,
    CountedPerformanceFunction,
    EstimateUndefinedError,
    InputModel,
    RngStream,
)
from .sus import (
    StopCondition,
    SusConfig,
    cov_dmc,
    run_sus,
    sus_cov,
    sus_probability_estimate,
)


def piecewise_linear(x) -> np.ndarray:
    """Two-dimensional piecewise linear benchmark, negated min of two ramps.

    The failure region {g >= 0} is the union of the half-planes x1 >= 4 and
    x2 >= 5, but near the origin the x2 ramp is steeper, which lures greedy
    samplers away from the dominant x1 mode.
    """
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    g1 = np.where(x1 > 3.5, 4.0 - x1, 0.85 - 0.1 * x1)
    g2 = np.where(x2 > 2.0, 0.5 - 0.1 * x2, 2.3 - x2)
    return -np.minimum(g1, g2)


def himmelblau(x) -> np.ndarray:
    """Himmelblau's four-well function, negated so the maxima are at zero."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return -((x1**2 + x2 - 11.0) ** 2 + (x1 + x2**2 - 7.0) ** 2)


def first_coordinate(x) -> np.ndarray:
    """g(x) = x1: a half-space benchmark with an exact normal-tail oracle."""
    x = np.asarray(x, dtype=float)
    return x[..., 0].copy()


HIMMELBLAU_MAXIMISERS = np.array(
    [
        (3.0, 2.0),
        (-2.805118, 3.131312),
        (-3.779310, -3.283186),
        (3.584428, -1.848126),
    ]
)


def with_dummy_dims(fn: Callable, base_dim: int, total_dim: int) -> Callable:
    """Embed a performance function into a higher dimension.

    The extra coordinates never influence the output; they only stress the
    samplers and the partitioner's classifier.
    """
    if total_dim < base_dim:
        raise ConfigurationError(
            f"total dimension {total_dim} below base dimension {base_dim}"
        )
    if total_dim == base_dim:
        return fn

    def embedded(x):
        x = np.asarray(x, dtype=float)
        return fn(x[..., :base_dim])

    return embedded


@dataclass(frozen=True)
class Benchmark:
    name: str
    base_dim: int
    fn: Callable
    failure_threshold: float | None = None
    reference_probability: float | None = None
    maximisers: np.ndarray | None = None
    design_flag: Callable | None = None  # vectorized predicate over points


BENCHMARKS = {
    "piecewise_linear": Benchmark(
        name="piecewise_linear",
        base_dim=2,
        fn=piecewise_linear,
        failure_threshold=0.0,
        reference_probability=3.2e-5,
        design_flag=lambda pts: np.asarray(pts)[..., 0] > 3.5,
    ),
    "himmelblau": Benchmark(
        name="himmelblau",
        base_dim=2,
        fn=himmelblau,
        maximisers=HIMMELBLAU_MAXIMISERS,
    ),
    "first_coordinate": Benchmark(
        name="first_coordinate",
        base_dim=2,
        fn=first_coordinate,
        failure_threshold=2.0,
        reference_probability=0.5 * math.erfc(2.0 / math.sqrt(2.0)),
    ),
}


def benchmark_by_name(name: str) -> Benchmark:
    try:
        return BENCHMARKS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown benchmark {name!r}; available: {', '.join(sorted(BENCHMARKS))}"
        ) from None


@dataclass(frozen=True)
class DmcResult:
    estimate: float
    cov: float | None
    count: int
    zero: bool


def dmc_estimate(
    fn: Callable, dim: int, b: float, count: int, rng: RngStream, chunk_size: int = 500_000
) -> DmcResult:
    """Direct Monte Carlo exceedance fraction from ``count`` prior draws.

    ``fn`` must accept a (m, dim) array.  Draws are consumed in chunks so
    huge references stay within memory.
    """
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    gen = rng.generator()
    hits = 0
    remaining = count
    while remaining > 0:
        k = min(chunk_size, remaining)
        values = np.asarray(fn(gen.standard_normal((k, dim))))
        hits += int((values >= b).sum())
        remaining -= k
    fraction = hits / count
    cov = cov_dmc(fraction, count) if hits > 0 else None
    return DmcResult(estimate=fraction, cov=cov, count=count, zero=(hits == 0))


def msle(estimates, reference: float) -> float:
    """Mean squared log10 error of the positive estimates against a positive
    reference.  Zero estimates carry no logarithm and are excluded; callers
    report their count separately.  NaN when nothing is positive."""
    if reference <= 0:
        raise ConfigurationError(f"reference must be positive, got {reference}")
    logs = [
        (math.log10(e) - math.log10(reference)) ** 2 for e in estimates if e > 0
    ]
    if not logs:
        return float("nan")
    return float(np.mean(logs))


def maxima_found(points, maximisers, radius: float = 0.25) -> int:
    """Number of maximisers with at least one sample within ``radius``
    (inclusive).  Distances use only the maximisers' base coordinates, so
    dummy dimensions do not dilute the metric."""
    maximisers = np.atleast_2d(np.asarray(maximisers, dtype=float))
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        return 0
    points = np.atleast_2d(points)[:, : maximisers.shape[1]]
    found = 0
    for m in maximisers:
        dists = np.linalg.norm(points - m, axis=1)
        if dists.min() <= radius:
            found += 1
    return found


def kde_log10(estimates, grid_size: int = 128):
    """Gaussian kernel density of log10(estimates) with Silverman bandwidth,
    as (grid, density) arrays; None when fewer than two positive estimates
    or when they carry no spread."""
    logs = np.log10([e for e in estimates if e > 0])
    if logs.size < 2:
        return None
    sd = float(np.std(logs, ddof=1))
    iqr = float(np.quantile(logs, 0.75) - np.quantile(logs, 0.25))
    scale = min(sd, iqr / 1.34) if iqr > 0 else sd
    if scale <= 0:
        return None
    h = 0.9 * scale * logs.size ** (-0.2)
    grid = np.linspace(logs.min() - 3 * h, logs.max() + 3 * h, grid_size)
    z = (grid[:, None] - logs[None, :]) / h
    density = np.exp(-0.5 * z**2).sum(axis=1) / (logs.size * h * math.sqrt(2 * math.pi))
    return grid, density


@dataclass(frozen=True)
class ExperimentConfig:
    """A replicated run campaign: one benchmark, one algorithm, fixed
    parameters, ``replications`` independent seeds."""

    benchmark: str
    algorithm: str
    n: int
    p: float = 0.1
    dim: int | None = None
    graph_budget: int = 50
    penalty: str = "l2"
    c: float = 1.0
    replications: int = 100
    base_seed: int = 0
    spread: float = 1.0
    max_levels: int = 100
    radius: float = 0.25
    choose: str = "fifo"
    eval_budget: int | None = None
    constant_stop: bool = True

    def __post_init__(self):
        bench = benchmark_by_name(self.benchmark)
        if self.algorithm not in ("sus", "bsus"):
            raise ConfigurationError(
                f"algorithm must be 'sus' or 'bsus', got {self.algorithm!r}"
            )
        if self.dim is not None and self.dim < bench.base_dim:
            raise ConfigurationError(
                f"dim must be >= {bench.base_dim} for {self.benchmark}, got {self.dim}"
            )
        if self.replications < 1:
            raise ConfigurationError(
                f"replications must be >= 1, got {self.replications}"
            )
        # surfaces n*p / 1/p violations before any run starts
        self.sus_config()

    def sus_config(self) -> SusConfig:
        return SusConfig(
            n=self.n,
            p=self.p,
            proposal=ProposalSpec(spread=self.spread),
            max_levels=self.max_levels,
        )

    def total_dim(self) -> int:
        bench = benchmark_by_name(self.benchmark)
        return self.dim if self.dim is not None else bench.base_dim

    def stops(self) -> list[StopCondition]:
        bench = benchmark_by_name(self.benchmark)
        stops = []
        if bench.failure_threshold is not None:
            stops.append(StopCondition.failure_count(bench.failure_threshold))
        if self.constant_stop:
            stops.append(StopCondition.constant_performance())
        if self.eval_budget is not None:
            stops.append(StopCondition.eval_budget(self.eval_budget))
        return stops


@dataclass(frozen=True)
class RunRecord:
    run_index: int
    seed: int
    estimate: float | None
    cov: float | None
    eval_count: int
    levels: int
    branches: int
    maxima_found: int | None
    zero_flag: bool
    design_flag: bool | None


def derive_run_seed(base_seed: int, run_index: int) -> int:
    """Per-replication seed; feeding it back as a base seed reproduces the
    single run exactly."""
    seq = np.random.SeedSequence(entropy=base_seed, spawn_key=(run_index,))
    return int(seq.generate_state(1, np.uint64)[0])


def execute_single_run(config: ExperimentConfig, run_index: int, seed: int | None = None):
    """One replication: run the configured algorithm and derive its record.

    Returns (record, result) where result is the SusRun or BranchTree, for
    callers that need more than the record row.
    """
    bench = benchmark_by_name(config.benchmark)
    if seed is None:
        seed = derive_run_seed(config.base_seed, run_index)
    rng = RngStream(seed)
    dim = config.total_dim()
    fn = with_dummy_dims(bench.fn, bench.base_dim, dim)
    pf = CountedPerformanceFunction(fn, dim)
    model = InputModel(dim)
    sus_config = config.sus_config()
    stops = config.stops()

    if config.algorithm == "sus":
        result = run_sus(sus_config, model, pf, stops, rng)
        levels = result.levels
        n_levels, n_branches = result.n_levels, 1
        estimator = lambda b: sus_probability_estimate(result, b)
        cov_fn = lambda b: sus_cov(result, b)
    else:
        partitioner = ConvexGraphPartitioner(
            config.graph_budget, penalty=config.penalty, c=config.c
        )
        result = run_bsus(
            sus_config, model, pf, partitioner, ChooseStrategy(config.choose), stops, rng
        )
        levels = [node.level for node in result.nodes()]
        n_levels, n_branches = len(levels), len(result.leaves())
        estimator = lambda b: bsus_probability_estimate(result, b)
        cov_fn = lambda b: bsus_cov(result, b)

    estimate = cov = None
    zero = False
    if bench.failure_threshold is not None:
        prob = estimator(bench.failure_threshold)
        estimate, zero = prob.value, prob.zero
        try:
            cov = cov_fn(bench.failure_threshold)
        except EstimateUndefinedError:
            cov = None

    all_points = np.concatenate([lvl.points() for lvl in levels])
    maxima = (
        maxima_found(all_points, bench.maximisers, config.radius)
        if bench.maximisers is not None
        else None
    )
    design = (
        bool(np.any(bench.design_flag(all_points)))
        if bench.design_flag is not None
        else None
    )
    record = RunRecord(
        run_index=run_index,
        seed=seed,
        estimate=estimate,
        cov=cov,
        eval_count=pf.eval_count,
        levels=n_levels,
        branches=n_branches,
        maxima_found=maxima,
        zero_flag=zero,
        design_flag=design,
    )
    return record, result


def _record_task(payload) -> RunRecord:
    config_dict, run_index = payload
    record, _ = execute_single_run(ExperimentConfig(**config_dict), run_index)
    return record


@dataclass(frozen=True)
class ExperimentReport:
    config: ExperimentConfig
    records: list[RunRecord]

    def estimates(self) -> list[float]:
        return [r.estimate for r in self.records if r.estimate is not None]

    def aggregates(self) -> dict:
        bench = benchmark_by_name(self.config.benchmark)
        estimates = self.estimates()
        out = {
            "runs": len(self.records),
            "mean_eval_count": float(np.mean([r.eval_count for r in self.records])),
            "mean_levels": float(np.mean([r.levels for r in self.records])),
            "mean_branches": float(np.mean([r.branches for r in self.records])),
            "mean_estimate": float(np.mean(estimates)) if estimates else None,
            "zero_estimate_count": sum(1 for r in self.records if r.zero_flag),
            "msle": None,
            "avg_maxima_found": None,
            "design_flag_fraction": None,
            "kde_log10": None,
        }
        if estimates and bench.reference_probability is not None:
            value = msle(estimates, bench.reference_probability)
            out["msle"] = None if math.isnan(value) else value
        maxima = [r.maxima_found for r in self.records if r.maxima_found is not None]
        if maxima:
            out["avg_maxima_found"] = float(np.mean(maxima))
        flags = [r.design_flag for r in self.records if r.design_flag is not None]
        if flags:
            out["design_flag_fraction"] = float(np.mean(flags))
        kde = kde_log10(estimates) if estimates else None
        if kde is not None:
            grid, density = kde
            out["kde_log10"] = [[float(x), float(y)] for x, y in zip(grid, density)]
        return out


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentReport:
    """Execute ``config.replications`` independent runs with derived seeds.

    Replications are embarrassingly parallel; records come back ordered by
    run index, so the report is identical for any worker count.
    """
    indices = list(range(config.replications))
    if workers > 1:
        payloads = [(asdict(config), i) for i in indices]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_record_task, payloads))
    else:
        records = [execute_single_run(config, i)[0] for i in indices]
    records.sort(key=lambda r: r.run_index)
    return ExperimentReport(config=config, records=records)
