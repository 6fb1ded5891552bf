"""Convex graph partitioner: budgeted convexity-graph construction,
asynchronous label propagation, one-vs-rest linear SVC and partition
assembly, plus a Monte Carlo convexity-measure diagnostic.

The partitioner turns a level into a partition of the input space.  Pairs of
level samples are joined by an edge when the midpoint of their segment stays
at or above the lower of their two performances; communities of that graph
are regions a Markov chain can traverse without ergodicity problems, and a
linear classifier trained on the community labels extends the grouping from
the sampled points to all of R^d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .model import (
    ConfigurationError,
    CountedPerformanceFunction,
    Level,
    RngStream,
)


@dataclass(frozen=True)
class GraphBudget:
    """Number of performance evaluations allowed for graph construction."""

    n_e: int


def graph_sample_count(n_e: int) -> int:
    """Largest vertex count whose complete graph has at most ``n_e`` edges.

    Inverts m = v(v-1)/2; a budget below one edge still admits a single
    vertex.
    """
    if n_e < 1:
        return 1
    return int(math.floor((1 + math.sqrt(1 + 8 * n_e)) / 2))


@dataclass(frozen=True)
class ConvexityGraph:
    """Symmetric zero-diagonal boolean adjacency over subsampled level points."""

    adjacency: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[v])


def build_convexity_graph(
    level: Level,
    pf: CountedPerformanceFunction,
    budget: GraphBudget,
    rng: RngStream,
) -> tuple[ConvexityGraph, np.ndarray]:
    """Build the budgeted midpoint-test graph on a uniform level subsample.

    Draws min(graph_sample_count(n_e), level size) samples without
    replacement, then spends exactly one counted evaluation per vertex pair
    at the segment midpoint: the pair is adjacent iff the midpoint performs
    at least as well as the worse endpoint.  Returns the graph and the chosen
    sample indices.
    """
    if level.size == 0:
        raise ConfigurationError("cannot build a convexity graph on an empty level")
    n_sub = min(graph_sample_count(budget.n_e), level.size)
    gen = rng.generator()
    chosen = np.sort(gen.choice(level.size, size=n_sub, replace=False))
    points = level.points()[chosen]
    perfs = level.performances()[chosen]
    adjacency = np.zeros((n_sub, n_sub), dtype=bool)
    for i in range(n_sub):
        for j in range(i + 1, n_sub):
            midpoint = 0.5 * (points[i] + points[j])
            g_mid = pf(midpoint)
            if g_mid >= min(perfs[i], perfs[j]):
                adjacency[i, j] = adjacency[j, i] = True
    return ConvexityGraph(adjacency=adjacency), chosen


_ALP_MAX_SWEEPS = 200


def _labeling_complete(labels: np.ndarray, neighbor_lists: list[np.ndarray]) -> bool:
    for v, nbrs in enumerate(neighbor_lists):
        if nbrs.size == 0:
            continue
        counts = np.bincount(labels[nbrs], minlength=labels[v] + 1)
        if counts[labels[v]] != counts.max():
            return False
    return True


def alp(graph: ConvexityGraph, rng: RngStream) -> np.ndarray:
    """Asynchronous label propagation community detection.

    Every vertex starts with its own label.  Sweeps visit the vertices in a
    fresh random order and give each the most frequent label among its
    neighbors, reading already-updated neighbors at their new value; ties are
    broken uniformly at random.  The algorithm stops once every vertex's
    label is among the most frequent in its neighborhood (vertices without
    neighbors keep their initial label), with a hard sweep cap as a safety
    net.
    """
    n = graph.n_vertices
    labels = np.arange(n)
    neighbor_lists = [graph.neighbors(v) for v in range(n)]
    gen = rng.generator()
    for _ in range(_ALP_MAX_SWEEPS):
        if _labeling_complete(labels, neighbor_lists):
            break
        for v in gen.permutation(n):
            nbrs = neighbor_lists[v]
            if nbrs.size == 0:
                continue
            counts = np.bincount(labels[nbrs])
            best = np.flatnonzero(counts == counts.max())
            labels[v] = best[0] if best.size == 1 else gen.choice(best)
    return labels


class LinearClassifier:
    """One-vs-rest linear classifier: per-class weights, intercepts, labels.

    Predicts the class whose confidence score w.x + b is largest; ties go to
    the lowest class id (classes are stored in ascending label order).  With
    a single class every point maps to that class.
    """

    def __init__(self, weights: np.ndarray, intercepts: np.ndarray, labels: np.ndarray):
        self.weights = np.asarray(weights, dtype=float)
        self.intercepts = np.asarray(intercepts, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        self.objective_histories: list[list[float]] = []

    def decision_function(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return points @ self.weights.T + self.intercepts

    def predict(self, points: np.ndarray) -> np.ndarray:
        scores = self.decision_function(points)
        return self.labels[np.argmax(scores, axis=1)]

    def predict_one(self, point: np.ndarray) -> int:
        scores = self.weights @ np.asarray(point, dtype=float) + self.intercepts
        return int(self.labels[int(np.argmax(scores))])


_LSVC_TOL = 1e-6
_LSVC_MAX_EPOCHS = 1000


def _squared_hinge(margins: np.ndarray) -> float:
    return float(np.sum(np.maximum(0.0, 1.0 - margins) ** 2))


def _binary_objective(x, y, w, b, penalty, c):
    margins = y * (x @ w + b)
    if penalty == "l1":
        reg = 0.5 * float(np.sum(np.abs(w)))
    else:
        reg = 0.5 * float(w @ w)
    return reg + c * _squared_hinge(margins)


def _fit_binary(x, y, penalty, c):
    """Coordinate descent for 0.5*rho(w) + C*sum max(0, 1-y(w.x+b))^2.

    The intercept is unpenalised.  Each coordinate takes a Newton-type step
    with halving line search, so the objective never increases; epochs stop
    on relative objective change below 1e-6 or after the epoch cap.  Returns
    weights, intercept and the per-epoch objective history.
    """
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    scores = np.zeros(n)
    history = [_binary_objective(x, y, w, b, penalty, c)]

    def loss_derivatives(col):
        slack = 1.0 - y * scores
        active = slack > 0
        grad = -2.0 * c * np.sum(y[active] * col[active] * slack[active])
        hess = 2.0 * c * np.sum(col[active] ** 2) + 1e-12
        return grad, hess

    for _ in range(_LSVC_MAX_EPOCHS):
        for j in range(d):
            col = x[:, j]
            grad, hess = loss_derivatives(col)
            if penalty == "l1":
                # proximal step: soft-threshold the Newton target at 0.5/hess
                target = w[j] - grad / hess
                new = math.copysign(max(abs(target) - 0.5 / hess, 0.0), target)
            else:
                grad += w[j]
                hess += 1.0
                new = w[j] - grad / hess
            step = new - w[j]
            if step == 0.0:
                continue
            base = _binary_objective(x, y, w, b, penalty, c)
            for _halving in range(40):
                cand = w[j] + step
                old = w[j]
                w[j] = cand
                scores += col * step
                if _binary_objective(x, y, w, b, penalty, c) <= base + 1e-15:
                    break
                w[j] = old
                scores -= col * step
                step *= 0.5
        ones = np.ones(n)
        grad, hess = loss_derivatives(ones)
        step = -grad / hess
        if step != 0.0:
            base = _binary_objective(x, y, w, b, penalty, c)
            for _halving in range(40):
                if _binary_objective(x, y, w, b + step, penalty, c) <= base + 1e-15:
                    b += step
                    scores += step
                    break
                step *= 0.5
        history.append(_binary_objective(x, y, w, b, penalty, c))
        prev, cur = history[-2], history[-1]
        if abs(prev - cur) <= _LSVC_TOL * max(1.0, abs(prev)):
            break
    return w, b, history


def train_lsvc(points, labels, penalty: str = "l2", c: float = 1.0) -> LinearClassifier:
    """Train a one-vs-rest linear SVC with squared hinge loss.

    ``penalty`` is "l1" or "l2" and ``c`` the regularisation parameter.  A
    single distinct label yields the trivial classifier mapping everything to
    it.  Per-class objective histories are kept on the returned classifier.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    labels = np.asarray(labels, dtype=int)
    if points.shape[0] < 1:
        raise ConfigurationError("training requires at least one point")
    if points.shape[0] != labels.shape[0]:
        raise ConfigurationError("points and labels must have equal length")
    if penalty not in ("l1", "l2"):
        raise ConfigurationError(f"penalty must be 'l1' or 'l2', got {penalty!r}")
    if c <= 0:
        raise ConfigurationError(f"regularisation parameter must be > 0, got {c}")
    classes = np.unique(labels)
    d = points.shape[1]
    if classes.size == 1:
        clf = LinearClassifier(np.zeros((1, d)), np.zeros(1), classes)
        clf.objective_histories = [[0.0]]
        return clf
    weights = np.zeros((classes.size, d))
    intercepts = np.zeros(classes.size)
    histories = []
    for k, cls in enumerate(classes):
        y = np.where(labels == cls, 1.0, -1.0)
        w, b, history = _fit_binary(points, y, penalty, c)
        weights[k] = w
        intercepts[k] = b
        histories.append(history)
    clf = LinearClassifier(weights, intercepts, classes)
    clf.objective_histories = histories
    return clf


@dataclass(frozen=True)
class Partition:
    """A total partition of R^d: a classifier (or the trivial single-set
    marker, classifier None) plus the cell labels populated by the level."""

    classifier: LinearClassifier | None
    cells: tuple[int, ...]

    @property
    def is_single_set(self) -> bool:
        return self.classifier is None

    def assign(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.classifier is None:
            return np.zeros(points.shape[0], dtype=int)
        return self.classifier.predict(points)


SINGLE_SET_PARTITION = Partition(classifier=None, cells=(0,))


def _merge_singletons(points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Reassign one-member communities to the community of the nearest
    multi-member labeled point; with no multi-member community the labels are
    returned unchanged (the caller falls back to the single-set partition).
    A one-point class would destabilise one-vs-rest training."""
    values, counts = np.unique(labels, return_counts=True)
    single_values = set(values[counts == 1])
    if not single_values or len(single_values) == len(values):
        return labels
    merged = labels.copy()
    anchor = np.flatnonzero(~np.isin(labels, list(single_values)))
    for v in np.flatnonzero(np.isin(labels, list(single_values))):
        dists = np.linalg.norm(points[anchor] - points[v], axis=1)
        merged[v] = labels[anchor[int(np.argmin(dists))]]
    return merged


def cgp_partition(
    level: Level,
    pf: CountedPerformanceFunction,
    budget: GraphBudget,
    rng: RngStream,
    penalty: str = "l2",
    c: float = 1.0,
) -> Partition:
    """Full partitioner pipeline: graph, communities, classifier, partition.

    Level samples that were not subsampled into the graph are ignored during
    training.  One community (before or after singleton merging) gives the
    single-set partition, as does a classifier that assigns every level
    sample to one cell; otherwise the returned cells are the classifier
    labels actually populated by the level.
    """
    graph, chosen = build_convexity_graph(level, pf, budget, rng.child(0))
    labels = alp(graph, rng.child(1))
    points = level.points()[chosen]
    labels = _merge_singletons(points, labels)
    if np.unique(labels).size == 1:
        return SINGLE_SET_PARTITION
    classifier = train_lsvc(points, labels, penalty=penalty, c=c)
    assigned = classifier.predict(level.points())
    populated = np.unique(assigned)
    if populated.size == 1:
        return SINGLE_SET_PARTITION
    return Partition(classifier=classifier, cells=tuple(int(v) for v in populated))


def estimate_convexity_measure(
    region: Callable[[np.ndarray], bool],
    sampler: Callable[[int, np.random.Generator], np.ndarray],
    pairs: int,
    rng: RngStream,
    segment_checks: int = 16,
) -> float:
    """Monte Carlo estimate of how convex a region is under its distribution.

    Draws ``pairs`` point pairs via ``sampler`` (which must produce points
    inside the region) and checks ``segment_checks`` evenly spaced interior
    points of each connecting segment for membership.  The estimate is the
    fraction of pairs whose segment stays inside; 1.0 for convex regions.
    """
    if pairs < 1:
        raise ConfigurationError(f"pairs must be >= 1, got {pairs}")
    gen = rng.generator()
    ts = np.arange(1, segment_checks + 1) / (segment_checks + 1)
    passing = 0
    for _ in range(pairs):
        two = sampler(2, gen)
        x, y = np.asarray(two[0], dtype=float), np.asarray(two[1], dtype=float)
        interior = x[None, :] + ts[:, None] * (y - x)[None, :]
        if all(region(pt) for pt in interior):
            passing += 1
    return passing / pairs


class Partitioner(Protocol):
    """Partition strategy used by branching runs.

    ``initial_budget`` is the graph budget granted to the root branch; the
    run splits it among child branches in proportion to their sizes.
    """

    initial_budget: int

    def partition(
        self, level: Level, pf: CountedPerformanceFunction, budget: int, rng: RngStream
    ) -> Partition: ...


class SingleSetPartitioner:
    """Degenerate partitioner: never splits, so a branching run reduces to
    plain subset simulation.  Consumes no randomness and no budget."""

    initial_budget = 0

    def partition(self, level, pf, budget, rng) -> Partition:
        return SINGLE_SET_PARTITION


class ConvexGraphPartitioner:
    """Convexity-graph pipeline with a global graph budget ``n_e``."""

    def __init__(self, n_e: int, penalty: str = "l2", c: float = 1.0):
        if n_e < 0:
            raise ConfigurationError(f"graph budget must be >= 0, got {n_e}")
        self.initial_budget = int(n_e)
        self.penalty = penalty
        self.c = c

    def partition(self, level, pf, budget, rng) -> Partition:
        return cgp_partition(
            level, pf, GraphBudget(budget), rng, penalty=self.penalty, c=self.c
        )
