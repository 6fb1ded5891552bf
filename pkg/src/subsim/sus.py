"""Subset simulation: the level loop, stopping conditions and the
probability / coefficient-of-variation estimators.

A run maintains a fixed-size population per level.  The top ``n*p`` samples
of the current level seed Markov chains whose stationary distribution is the
input density restricted to the adaptively chosen intermediate exceedance
region; the chains (seeds included) form the next level.  The resulting
estimator for an exceedance probability is a product of one direct Monte
Carlo fraction and per-level conditional fractions that equal ``p`` exactly
by the adaptive threshold choice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mcmc import ChainTarget, ProposalSpec, run_chain
from .model import (
    ConfigurationError,
    CountedPerformanceFunction,
    EstimateUndefinedError,
    EvaluatedSample,
    InputModel,
    Level,
    RngStream,
    WHOLE_SPACE,
    evaluate,
    sample_prior,
)

# rng path namespaces shared by run_sus and run_bsus so that a branching run
# with a trivial partitioner consumes exactly the streams of a plain run
PRIOR_STREAM = 0
CHAIN_STREAM = 1
PARTITION_STREAM = 2
CONDITIONAL_STREAM = 3


def _integral(x: float) -> bool:
    return abs(x - round(x)) < 1e-9


@dataclass(frozen=True)
class SusConfig:
    """Level size ``n``, level probability ``p`` and proposal settings.

    ``n * p`` (the seed count) and ``1 / p`` (the chain length) must both be
    integers.  ``max_levels`` is a safety cap on the number of non-initial
    levels for runs whose stopping conditions may never fire.
    """

    n: int
    p: float
    proposal: ProposalSpec = ProposalSpec()
    max_levels: int = 100

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError(f"level size must be >= 1, got {self.n}")
        if not 0 < self.p <= 1:
            raise ConfigurationError(f"level probability must be in (0, 1], got {self.p}")
        if not _integral(self.n * self.p):
            raise ConfigurationError(
                f"n*p must be a positive integer, got n={self.n}, p={self.p}"
            )
        if not _integral(1 / self.p):
            raise ConfigurationError(f"1/p must be a positive integer, got p={self.p}")

    @property
    def n_c(self) -> int:
        return round(self.n * self.p)

    @property
    def n_s(self) -> int:
        return round(1 / self.p)


@dataclass(frozen=True)
class StopCondition:
    """One stopping rule; a run takes a list of them, OR-combined.

    ``failure_count(b)`` fires once the current level holds at least the
    would-be seed count of samples with performance >= b.
    ``constant_performance`` fires when the level performance is constant.
    ``eval_budget(m)`` fires once the counted evaluator reaches m calls.
    """

    kind: str
    threshold: float | None = None
    max_evals: int | None = None

    @classmethod
    def failure_count(cls, threshold: float) -> "StopCondition":
        return cls(kind="failure_count", threshold=float(threshold))

    @classmethod
    def constant_performance(cls) -> "StopCondition":
        return cls(kind="constant_performance")

    @classmethod
    def eval_budget(cls, max_evals: int) -> "StopCondition":
        return cls(kind="eval_budget", max_evals=int(max_evals))

    def fires(self, level: Level, p: float, pf: CountedPerformanceFunction) -> bool:
        if self.kind == "failure_count":
            need = math.ceil(p * level.size - 1e-9)
            return int((level.performances() >= self.threshold).sum()) >= need
        if self.kind == "constant_performance":
            perfs = level.performances()
            return bool(perfs.max() == perfs.min())
        if self.kind == "eval_budget":
            return pf.eval_count >= self.max_evals
        raise ConfigurationError(f"unknown stop condition kind {self.kind!r}")


def first_firing(
    stops: list[StopCondition], level: Level, p: float, pf: CountedPerformanceFunction
) -> str | None:
    """Kind of the first stop condition that fires, or None."""
    for stop in stops:
        if stop.fires(level, p, pf):
            return stop.kind
    return None


def select_seeds(
    samples: tuple[EvaluatedSample, ...], count: int
) -> tuple[float, list[EvaluatedSample]]:
    """Top ``count`` samples under a stable descending performance sort.

    Returns the selection threshold (performance of the lowest seed) and the
    seeds in descending order.  Ties at the cutoff keep the original sample
    order, so the selection is deterministic.
    """
    if not 1 <= count <= len(samples):
        raise ConfigurationError(
            f"seed count {count} out of range for level of size {len(samples)}"
        )
    perfs = np.array([s.performance for s in samples])
    order = np.argsort(-perfs, kind="stable")
    seeds = [samples[i] for i in order[:count]]
    return seeds[-1].performance, seeds


def select_threshold(level: Level, p: float) -> tuple[float, list[EvaluatedSample]]:
    """Intermediate threshold and seeds for the next level at probability ``p``."""
    if not _integral(level.size * p):
        raise ConfigurationError(
            f"level size {level.size} times p={p} is not an integer seed count"
        )
    return select_seeds(level.samples, round(level.size * p))


@dataclass(frozen=True)
class SusRun:
    """Output of a subset simulation run: all levels (initial one included),
    the intermediate thresholds b_1..b_m and the reason the loop exited."""

    config: SusConfig
    levels: list[Level]
    thresholds: list[float]
    stop_reason: str

    @property
    def n_levels(self) -> int:
        return len(self.levels)


def run_sus(
    config: SusConfig,
    model: InputModel,
    pf: CountedPerformanceFunction,
    stops: list[StopCondition],
    rng: RngStream,
) -> SusRun:
    """Run subset simulation until a stopping condition (or the level cap) fires."""
    points = sample_prior(model, config.n, rng.child(PRIOR_STREAM, 0))
    level = Level([evaluate(pf, x) for x in points])
    levels = [level]
    thresholds: list[float] = []

    while True:
        reason = first_firing(stops, levels[-1], config.p, pf)
        if reason is not None:
            return SusRun(config, levels, thresholds, reason)
        if len(levels) - 1 >= config.max_levels:
            return SusRun(config, levels, thresholds, "level_cap")
        k = len(levels)  # index of the level about to be created
        b, seeds = select_threshold(levels[-1], config.p)
        target = ChainTarget(model=model, threshold=b, pf=pf, constraint=WHOLE_SPACE)
        samples: list[EvaluatedSample] = []
        for i, seed in enumerate(seeds):
            samples.extend(
                run_chain(seed, config.n_s, target, config.proposal, rng.child(CHAIN_STREAM, k, i))
            )
        levels.append(Level(samples, n_chains=len(seeds), chain_length=config.n_s))
        thresholds.append(b)


@dataclass(frozen=True)
class ProbabilityEstimate:
    """Estimate value plus a flag marking the degenerate all-zero case."""

    value: float
    zero: bool

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class ConditionalFactor:
    """One factor of a product-form estimator: the fraction ``value`` of
    ``level`` samples that fall in the next set, with the per-sample
    indicators kept for correlation estimation."""

    value: float
    level: Level
    indicators: np.ndarray


def product_estimate(factors: list[ConditionalFactor]) -> ProbabilityEstimate:
    value = 1.0
    for f in factors:
        value *= f.value
    return ProbabilityEstimate(value=value, zero=(value == 0.0))


def cov_dmc(p1: float, n: int) -> float:
    """C.o.v. of a direct Monte Carlo fraction: sqrt((1-P1)/(n*P1))."""
    if p1 <= 0:
        raise EstimateUndefinedError("c.o.v. undefined for a zero estimate")
    if p1 > 1:
        raise ConfigurationError(f"probability must be in (0, 1], got {p1}")
    return math.sqrt((1 - p1) / (n * p1))


def cov_mcmc(pk: float, n: int, gamma: float) -> float:
    """C.o.v. of a chain-based fraction: sqrt((1-Pk)/(n*Pk) * (1+gamma))."""
    if gamma < 0:
        raise ConfigurationError(f"gamma must be nonnegative, got {gamma}")
    return cov_dmc(pk, n) * math.sqrt(1 + gamma)


def estimate_gamma(indicators, p: float) -> float:
    """Chain-correlation factor of an indicator matrix (one row per chain).

    Lag-j autocovariances are pooled across chains, normalised by the
    indicator variance and combined with triangular weights over the row
    length (the chain length, nominally 1/p).  Seeds are ordinary chain
    states here: perfect sampling makes them valid draws.  The estimate is
    clamped below at zero; a constant indicator yields zero.
    """
    ind = np.asarray(indicators, dtype=float)
    if ind.ndim != 2 or ind.size == 0:
        raise ConfigurationError("indicator matrix must be nonempty and 2-d")
    n_chains, n_s = ind.shape
    n = ind.size
    pk = ind.mean()
    variance = pk * (1 - pk)
    if variance == 0:
        return 0.0
    gamma = 0.0
    for j in range(1, n_s):
        pooled = np.sum(ind[:, : n_s - j] * ind[:, j:])
        autocov = pooled / (n - j * n_chains) - pk * pk
        gamma += 2 * (1 - j / n_s) * (autocov / variance)
    return max(0.0, gamma)


def factor_cov_sq(factor: ConditionalFactor, p: float) -> float:
    """Squared c.o.v. contribution of one conditional factor.

    Levels with chain provenance use the correlation-adjusted formula; the
    prior level and carved-out sub-levels (no chain layout) are treated as
    direct Monte Carlo.
    """
    if factor.value <= 0:
        raise EstimateUndefinedError("c.o.v. undefined for a zero estimate")
    level = factor.level
    if level.has_chain_layout:
        gamma = estimate_gamma(level.indicator_matrix(factor.indicators), p)
        return cov_mcmc(factor.value, level.size, gamma) ** 2
    return cov_dmc(factor.value, level.size) ** 2


def _sus_factors(run: SusRun, b: float) -> list[ConditionalFactor]:
    """Factors of the estimator for P(g >= b) from a run's usable levels.

    With b_0 = -inf, the last usable level is m' = max{k : b_k < b}; each
    intermediate factor equals p exactly by the adaptive threshold choice and
    the final factor is the fraction of level m' at or above b.
    """
    m_prime = sum(1 for t in run.thresholds if t < b)
    factors = []
    for k in range(1, m_prime + 1):
        level = run.levels[k - 1]
        indicators = (level.performances() >= run.thresholds[k - 1]).astype(float)
        factors.append(ConditionalFactor(run.config.p, level, indicators))
    final_level = run.levels[m_prime]
    indicators = (final_level.performances() >= b).astype(float)
    fraction = float(indicators.sum()) / final_level.size
    factors.append(ConditionalFactor(fraction, final_level, indicators))
    return factors


def sus_probability_estimate(run: SusRun, b: float) -> ProbabilityEstimate:
    """Estimate P(g >= b) as p^m' times the final-level exceedance fraction.

    If no sample of the last usable level reaches b the estimate is zero and
    flagged rather than raised, so experiment aggregation can count failures.
    """
    return product_estimate(_sus_factors(run, b))


def sus_cov(run: SusRun, b: float) -> float:
    """Combined c.o.v. sqrt(sum_k delta_k^2) of the run's estimator for
    P(g >= b); raises ``EstimateUndefinedError`` on a zero estimate."""
    factors = _sus_factors(run, b)
    return math.sqrt(sum(factor_cov_sq(f, run.config.p) for f in factors))
