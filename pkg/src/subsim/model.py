"""Shared domain types: input model, counted performance evaluation, samples,
levels, region constraints and the random-stream discipline.

All algorithms in this package operate in the standard Gaussian space: the
input distribution is a standard multivariate normal and any physically
meaningful input model is assumed to have been mapped onto it beforehand.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Invalid algorithm or experiment configuration."""


class DimensionMismatchError(ValueError):
    """A point does not match the expected input dimension."""


class SeedViolationError(ValueError):
    """A chain seed does not satisfy the chain's target indicators."""


class EstimateUndefinedError(ArithmeticError):
    """A coefficient of variation is requested for a zero estimate."""


@dataclass(frozen=True)
class InputModel:
    """Standard multivariate normal input of dimension ``dim``."""

    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError(f"input dimension must be >= 1, got {self.dim}")


class RngStream:
    """Splittable random stream keyed by a seed and a hierarchical path.

    Streams are cheap immutable descriptors.  ``child(*indices)`` derives a
    statistically independent stream; the same (seed, path) always reproduces
    the same draws, so consumers can be reordered without perturbing each
    other.  Each logical consumer must derive its own child before drawing.
    """

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(i) for i in path)

    def child(self, *indices: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(i) for i in indices))

    def generator(self) -> np.random.Generator:
        """Fresh counter-based generator for this stream."""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


class CountedPerformanceFunction:
    """Deterministic scalar performance function with an evaluation counter.

    The counter increments by exactly one per call; there is no memoisation,
    so re-evaluating a point costs another call.  Incrementing is guarded by
    a lock so that concurrent replications sharing an instance stay exact.
    """

    def __init__(self, fn: Callable[[np.ndarray], float], dim: int):
        self._fn = fn
        self.dim = int(dim)
        self._count = 0
        self._lock = threading.Lock()

    @property
    def eval_count(self) -> int:
        return self._count

    def __call__(self, point) -> float:
        point = np.asarray(point, dtype=float)
        if point.shape != (self.dim,):
            raise DimensionMismatchError(
                f"expected point of shape ({self.dim},), got {point.shape}"
            )
        with self._lock:
            self._count += 1
        return float(self._fn(point))


@dataclass(frozen=True, eq=False)
class EvaluatedSample:
    """A point together with its cached performance value.

    The performance is evaluated exactly once, at sampling time; indicator
    checks against thresholds reuse the cached value for free.
    """

    point: np.ndarray
    performance: float


def evaluate(pf: CountedPerformanceFunction, point) -> EvaluatedSample:
    """Evaluate ``point`` (one counted call) and cache the result."""
    point = np.array(point, dtype=float)
    g = pf(point)
    point.flags.writeable = False
    return EvaluatedSample(point=point, performance=g)


class Level:
    """Ordered population of evaluated samples.

    Levels created by Markov chains record their layout: samples are stored
    chain-major, ``n_chains`` chains of ``chain_length`` states each, with the
    seed first in every chain.  Levels without that structure (the initial
    prior level, or a subset carved out of another level) leave the layout
    unset.  Rejections duplicate states, so a level is a multiset of points.
    """

    __slots__ = ("samples", "n_chains", "chain_length", "_points", "_performances")

    def __init__(
        self,
        samples: Sequence[EvaluatedSample],
        n_chains: int | None = None,
        chain_length: int | None = None,
    ):
        self.samples = tuple(samples)
        if (n_chains is None) != (chain_length is None):
            raise ConfigurationError("n_chains and chain_length must be set together")
        if n_chains is not None and n_chains * chain_length != len(self.samples):
            raise ConfigurationError(
                f"{len(self.samples)} samples do not fill "
                f"{n_chains} chains of length {chain_length}"
            )
        self.n_chains = n_chains
        self.chain_length = chain_length
        self._points = None
        self._performances = None

    @property
    def size(self) -> int:
        return len(self.samples)

    @property
    def has_chain_layout(self) -> bool:
        return self.n_chains is not None

    def points(self) -> np.ndarray:
        if self._points is None:
            self._points = np.array([s.point for s in self.samples])
        return self._points

    def performances(self) -> np.ndarray:
        if self._performances is None:
            self._performances = np.array([s.performance for s in self.samples])
        return self._performances

    def chain_indices(self) -> np.ndarray:
        """Chain index per sample; -1 for samples without chain provenance."""
        if not self.has_chain_layout:
            return np.full(self.size, -1)
        return np.repeat(np.arange(self.n_chains), self.chain_length)

    def indicator_matrix(self, values: np.ndarray) -> np.ndarray:
        """Reshape per-sample indicator values into a (chains, steps) matrix."""
        if not self.has_chain_layout:
            raise ConfigurationError("level has no chain layout")
        return np.asarray(values).reshape(self.n_chains, self.chain_length)


class Classifier(Protocol):
    """Anything that assigns an integer label to a point."""

    def predict_one(self, point: np.ndarray) -> int: ...


@dataclass(frozen=True)
class RegionClause:
    classifier: "Classifier"
    label: int


@dataclass(frozen=True)
class RegionConstraint:
    """Conjunction of classifier-cell memberships defining a subset of R^d.

    An empty clause list is the whole space.  The optional ``threshold``
    records the intermediate exceedance bound attached to the region; it is
    metadata only, membership never re-evaluates the performance function.
    """

    clauses: tuple[RegionClause, ...] = ()
    threshold: float | None = None

    def contains(self, point: np.ndarray) -> bool:
        return all(c.classifier.predict_one(point) == c.label for c in self.clauses)

    def child(self, classifier: "Classifier", label: int, threshold: float | None = None):
        """Refine with one more clause; clause nesting holds by construction."""
        return RegionConstraint(
            clauses=self.clauses + (RegionClause(classifier, int(label)),),
            threshold=threshold,
        )


WHOLE_SPACE = RegionConstraint()


def region_contains(constraint: RegionConstraint, point) -> bool:
    """True iff every clause's classifier assigns ``point`` its required label."""
    return constraint.contains(np.asarray(point, dtype=float))


def sample_prior(model: InputModel, count: int, rng: RngStream) -> np.ndarray:
    """Draw ``count`` i.i.d. standard-normal vectors of length ``model.dim``."""
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    return rng.generator().standard_normal((count, model.dim))
