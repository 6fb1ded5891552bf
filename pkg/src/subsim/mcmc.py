"""Component-wise modified Metropolis sampler and chain runner.

The target density is the standard normal restricted to an exceedance region
{g >= b} and, optionally, to a region constraint (a conjunction of classifier
cells).  Because the input marginals are independent, each component is
proposed and accepted separately against its own marginal; the exceedance and
region indicators are then applied to the assembled candidate as a whole.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ConfigurationError,
    CountedPerformanceFunction,
    EvaluatedSample,
    InputModel,
    RegionConstraint,
    RngStream,
    SeedViolationError,
    WHOLE_SPACE,
    evaluate,
)


@dataclass(frozen=True)
class ProposalSpec:
    """Symmetric component-wise Gaussian proposal with standard deviation
    ``spread`` around the current component value."""

    spread: float = 1.0

    def __post_init__(self):
        if self.spread <= 0:
            raise ConfigurationError(f"proposal spread must be > 0, got {self.spread}")


@dataclass(frozen=True)
class ChainTarget:
    """Stationary density f(x) * 1{g(x) >= threshold} * 1{x in constraint},
    up to normalisation."""

    model: InputModel
    threshold: float
    pf: CountedPerformanceFunction
    constraint: RegionConstraint = WHOLE_SPACE

    def satisfies(self, sample: EvaluatedSample) -> bool:
        return sample.performance >= self.threshold and self.constraint.contains(
            sample.point
        )


def modified_metropolis_step(
    state: EvaluatedSample,
    target: ChainTarget,
    proposal: ProposalSpec,
    gen: np.random.Generator,
) -> EvaluatedSample:
    """One modified Metropolis transition from ``state``.

    Per component i, a candidate is drawn from N(x_i, spread^2) and kept with
    probability min(1, f(x'_i)/f(x_i)) against the standard-normal marginal.
    If every component is rejected the candidate equals the current state and
    no performance evaluation is spent; otherwise the assembled candidate
    costs exactly one evaluation and is discarded if it fails the exceedance
    or the region indicator.
    """
    x = state.point
    d = x.shape[0]
    cand = x + proposal.spread * gen.standard_normal(d)
    # log f(x'_i) - log f(x_i) for the standard-normal marginal
    log_ratio = 0.5 * (x * x - cand * cand)
    with np.errstate(divide="ignore"):
        accept = np.log(gen.random(d)) < log_ratio
    if not accept.any():
        return state
    assembled = np.where(accept, cand, x)
    g = target.pf(assembled)
    if g < target.threshold:
        return state
    if not target.constraint.contains(assembled):
        return state
    assembled.flags.writeable = False
    return EvaluatedSample(point=assembled, performance=g)


def run_chain(
    seed_sample: EvaluatedSample,
    length: int,
    target: ChainTarget,
    proposal: ProposalSpec,
    rng: RngStream,
) -> list[EvaluatedSample]:
    """Run a chain of ``length`` states starting from (and including) the seed.

    Seeds must already satisfy both target indicators: they are distributed
    according to the target by construction (perfect sampling), so there is
    no burn-in and every state belongs to the level.
    """
    if length < 1:
        raise ConfigurationError(f"chain length must be >= 1, got {length}")
    if not target.satisfies(seed_sample):
        raise SeedViolationError(
            "chain seed violates the target indicators "
            f"(g={seed_sample.performance}, threshold={target.threshold})"
        )
    gen = rng.generator()
    chain = [seed_sample]
    state = seed_sample
    for _ in range(length - 1):
        state = modified_metropolis_step(state, target, proposal, gen)
        chain.append(state)
    return chain
