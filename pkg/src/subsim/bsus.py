"""Branching subset simulation: tree construction, chain allocation with the
leaf-sum rule, trimmed-tree estimators, the branching c.o.v. and conditional
sampling from the union of branch regions.

Instead of promoting the globally best samples, a branching run partitions
the input space whenever the partitioner splits a level, and continues an
independent confined run inside every cell.  The result is a tree whose
nodes hold a level, a region constraint and an intermediate threshold; the
exceedance probability is the sum of path-product estimators over the leaves
of the tree trimmed at the requested threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cgp import Partition, Partitioner
from .mcmc import ChainTarget, run_chain
from .model import (
    ConfigurationError,
    CountedPerformanceFunction,
    EstimateUndefinedError,
    EvaluatedSample,
    InputModel,
    Level,
    RegionConstraint,
    RngStream,
    WHOLE_SPACE,
    evaluate,
    sample_prior,
)
from .sus import (
    CHAIN_STREAM,
    CONDITIONAL_STREAM,
    PARTITION_STREAM,
    PRIOR_STREAM,
    ConditionalFactor,
    ProbabilityEstimate,
    StopCondition,
    SusConfig,
    factor_cov_sq,
    first_firing,
    product_estimate,
    select_seeds,
)

CHOOSE_STREAM = 4


@dataclass
class BranchNode:
    """One node of the branching tree: a level confined to ``region`` with
    every sample at or above ``threshold`` (-inf at the root).

    ``conditional_factor`` is this node's factor in any path estimator (the
    fraction of the parent level assigned to this node's set), and
    ``parent_indicators`` the per-parent-sample membership indicators behind
    it, kept for correlation-aware c.o.v. estimation.
    """

    level: Level
    region: RegionConstraint
    threshold: float
    creation_index: int
    depth: int
    graph_budget: int
    chain_count: int | None = None
    conditional_factor: float | None = None
    parent_indicators: np.ndarray | None = None
    parent: "BranchNode | None" = None
    children: list["BranchNode"] = field(default_factory=list)
    stopped: bool = False
    stop_reason: str | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def path_from_root(self) -> list["BranchNode"]:
        path = []
        node = self
        while node is not None:
            path.append(node)
            node = node.parent
        return path[::-1]

    def mark_stopped(self, reason: str):
        self.stopped = True
        self.stop_reason = reason


@dataclass
class BranchTree:
    """Output of a branching run, with the references needed to keep
    estimating and sampling from it afterwards."""

    root: BranchNode
    config: SusConfig
    model: InputModel
    pf: CountedPerformanceFunction

    def nodes(self) -> list[BranchNode]:
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            out.append(node)
            stack.extend(reversed(node.children))
        return sorted(out, key=lambda n: n.creation_index)

    def leaves(self) -> list[BranchNode]:
        return [n for n in self.nodes() if n.is_leaf]


@dataclass(frozen=True)
class ChooseStrategy:
    """Which unstopped leaf to expand next: the first created, or a uniform
    random one."""

    kind: str = "fifo"

    @classmethod
    def fifo(cls) -> "ChooseStrategy":
        return cls(kind="fifo")

    @classmethod
    def uniform_random(cls) -> "ChooseStrategy":
        return cls(kind="uniform_random")

    def pick(self, candidates: list[BranchNode], gen: np.random.Generator) -> BranchNode:
        if self.kind == "fifo":
            return min(candidates, key=lambda n: n.creation_index)
        if self.kind == "uniform_random":
            return candidates[int(gen.integers(len(candidates)))]
        raise ConfigurationError(f"unknown choose strategy {self.kind!r}")


def _largest_remainder(quotas: np.ndarray, total: int) -> list[int]:
    """Integer apportionment of ``total`` seats matching ``quotas``; leftover
    seats go to the largest remainders, ties to the lower index."""
    base = np.floor(quotas + 1e-12).astype(int)
    deficit = total - int(base.sum())
    if deficit > 0:
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:deficit]] += 1
    return [int(v) for v in base]


def allocate_chains(subset_sizes: list[int], p: float) -> list[int]:
    """Chain counts per partition cell by largest-remainder apportionment of
    the quotas p*size, summing to p times the branching level size (so the
    leaf chain-sum rule is preserved).  A small cell may receive zero chains.
    """
    if any(s < 1 for s in subset_sizes):
        raise ConfigurationError("subset sizes must be positive")
    sizes = np.asarray(subset_sizes, dtype=float)
    total = int(round(p * sizes.sum()))
    return _largest_remainder(p * sizes, total)


def split_graph_budget(budget: int, subset_sizes: list[int]) -> list[int]:
    """Split a branch's graph budget among its children in proportion to
    their sizes (largest remainder, like the chain allocation)."""
    sizes = np.asarray(subset_sizes, dtype=float)
    return _largest_remainder(budget * sizes / sizes.sum(), int(budget))


def _per_branch_stops(stops: list[StopCondition]) -> list[StopCondition]:
    return [s for s in stops if s.kind != "eval_budget"]


def _budget_stop(stops: list[StopCondition]) -> StopCondition | None:
    for s in stops:
        if s.kind == "eval_budget":
            return s
    return None


def run_bsus(
    config: SusConfig,
    model: InputModel,
    pf: CountedPerformanceFunction,
    partitioner: Partitioner,
    choose: ChooseStrategy,
    stops: list[StopCondition],
    rng: RngStream,
) -> BranchTree:
    """Run branching subset simulation and return the branch tree.

    Loop: while an unstopped leaf exists (and the global evaluation budget,
    if any, is not spent), choose one, partition its level, and for every
    populated cell allocate chains, select local seeds and a local threshold,
    and attach the confined chain level as a child node.  Cells allotted no
    chains become passthrough leaves holding just their slice of the parent
    level.  Per-branch stopping conditions are evaluated when a node is
    created; with a single-set partitioner the run reproduces plain subset
    simulation exactly, stream for stream.
    """
    points = sample_prior(model, config.n, rng.child(PRIOR_STREAM, 0))
    root = BranchNode(
        level=Level([evaluate(pf, x) for x in points]),
        region=WHOLE_SPACE,
        threshold=-math.inf,
        creation_index=0,
        depth=0,
        graph_budget=partitioner.initial_budget,
    )
    tree = BranchTree(root=root, config=config, model=model, pf=pf)
    branch_stops = _per_branch_stops(stops)
    budget_stop = _budget_stop(stops)
    _mark_new_node(root, branch_stops, config, pf)

    next_index = 1
    choose_gen = rng.child(CHOOSE_STREAM).generator()

    while True:
        open_leaves = [n for n in tree.nodes() if n.is_leaf and not n.stopped]
        if budget_stop is not None and pf.eval_count >= budget_stop.max_evals:
            for leaf in open_leaves:
                leaf.mark_stopped("eval_budget")
            break
        if not open_leaves:
            break
        leaf = choose.pick(open_leaves, choose_gen)
        partition = partitioner.partition(
            leaf.level, pf, leaf.graph_budget, rng.child(PARTITION_STREAM, leaf.creation_index)
        )
        next_index = _expand(leaf, partition, tree, branch_stops, rng, next_index)
    return tree


def _mark_new_node(
    node: BranchNode,
    branch_stops: list[StopCondition],
    config: SusConfig,
    pf: CountedPerformanceFunction,
):
    reason = first_firing(branch_stops, node.level, config.p, pf)
    if reason is None and node.depth >= config.max_levels:
        reason = "level_cap"
    if reason is not None:
        node.mark_stopped(reason)


def _expand(
    leaf: BranchNode,
    partition: Partition,
    tree: BranchTree,
    branch_stops: list[StopCondition],
    rng: RngStream,
    next_index: int,
) -> int:
    config, model, pf = tree.config, tree.model, tree.pf
    assigned = partition.assign(leaf.level.points())
    cells = [(label, np.flatnonzero(assigned == label)) for label in partition.cells]
    cells = [(label, idx) for label, idx in cells if idx.size > 0]
    allocations = allocate_chains([idx.size for _, idx in cells], config.p)
    budgets = split_graph_budget(leaf.graph_budget, [idx.size for _, idx in cells])
    parent_perfs = leaf.level.performances()

    for (label, idx), n_chains, child_budget in zip(cells, allocations, budgets):
        cell_samples = tuple(leaf.level.samples[i] for i in idx)
        in_cell = np.zeros(leaf.level.size, dtype=bool)
        in_cell[idx] = True
        if partition.is_single_set:
            region = leaf.region
        else:
            region = leaf.region.child(partition.classifier, label)

        if n_chains == 0:
            # the branch consists entirely of its initial slice of the level
            child = BranchNode(
                level=Level(cell_samples),
                region=RegionConstraint(region.clauses, threshold=leaf.threshold),
                threshold=leaf.threshold,
                creation_index=next_index,
                depth=leaf.depth + 1,
                graph_budget=child_budget,
                chain_count=0,
                conditional_factor=idx.size / leaf.level.size,
                parent_indicators=in_cell & (parent_perfs >= leaf.threshold),
                parent=leaf,
            )
            child.mark_stopped("no_chains")
        else:
            b, seeds = select_seeds(cell_samples, n_chains)
            region = RegionConstraint(region.clauses, threshold=b)
            target = ChainTarget(model=model, threshold=b, pf=pf, constraint=region)
            samples: list[EvaluatedSample] = []
            for i, seed in enumerate(seeds):
                samples.extend(
                    run_chain(
                        seed,
                        config.n_s,
                        target,
                        config.proposal,
                        rng.child(CHAIN_STREAM, next_index, i),
                    )
                )
            if idx.size == leaf.level.size:
                # trivial cell: the conditional fraction is exactly p by the
                # adaptive threshold choice, matching the plain-run estimator
                factor = config.p
            else:
                factor = n_chains / leaf.level.size
            child = BranchNode(
                level=Level(samples, n_chains=n_chains, chain_length=config.n_s),
                region=region,
                threshold=b,
                creation_index=next_index,
                depth=leaf.depth + 1,
                graph_budget=child_budget,
                chain_count=n_chains,
                conditional_factor=factor,
                parent_indicators=in_cell & (parent_perfs >= b),
                parent=leaf,
            )
            _mark_new_node(child, branch_stops, config, pf)
        leaf.children.append(child)
        next_index += 1
    return next_index


def _clone_subtree(node: BranchNode, parent: BranchNode | None, b: float) -> BranchNode:
    copy = BranchNode(
        level=node.level,
        region=node.region,
        threshold=node.threshold,
        creation_index=node.creation_index,
        depth=node.depth,
        graph_budget=node.graph_budget,
        chain_count=node.chain_count,
        conditional_factor=node.conditional_factor,
        parent_indicators=node.parent_indicators,
        parent=parent,
        stopped=node.stopped,
        stop_reason=node.stop_reason,
    )
    copy.children = [
        _clone_subtree(c, copy, b) for c in node.children if c.threshold < b
    ]
    return copy


def trim_tree(tree: BranchTree, b: float) -> BranchTree:
    """Tree restricted to the nodes usable for estimating P(g >= b).

    A node's level is conditioned on its intermediate threshold b', so it can
    only contribute to the estimator while b' < b; nodes with b' >= b are
    conditioned beyond the target region and are removed together with their
    descendants.  Thresholds never decrease along a path, so the survivors
    form a subtree anchored at the root (which always survives: its
    threshold is -inf).  The original tree is left untouched.
    """
    return BranchTree(
        root=_clone_subtree(tree.root, None, b),
        config=tree.config,
        model=tree.model,
        pf=tree.pf,
    )


def _leaf_factors(leaf: BranchNode, b: float) -> list[ConditionalFactor]:
    """Path estimator factors for one trimmed-tree leaf: one conditional
    factor per edge from the root, then the fraction of the leaf level in
    the target region."""
    factors = []
    for node in leaf.path_from_root()[1:]:
        factors.append(
            ConditionalFactor(
                value=node.conditional_factor,
                level=node.parent.level,
                indicators=node.parent_indicators.astype(float),
            )
        )
    indicators = (leaf.level.performances() >= b).astype(float)
    fraction = float(indicators.sum()) / leaf.level.size
    factors.append(ConditionalFactor(fraction, leaf.level, indicators))
    return factors


def bsus_probability_estimate(tree: BranchTree, b: float) -> ProbabilityEstimate:
    """Estimate P(g >= b) as the sum of per-leaf path estimators over the
    trimmed tree.  A zero total is flagged, not raised."""
    trimmed = trim_tree(tree, b)
    total = 0.0
    for leaf in trimmed.leaves():
        total += product_estimate(_leaf_factors(leaf, b)).value
    return ProbabilityEstimate(value=total, zero=(total == 0.0))


def bsus_cov(tree: BranchTree, b: float) -> float:
    """C.o.v. of the branching estimator for P(g >= b).

    Every leaf pair shares a common-root estimator (the product of factors
    along their shared path prefix); its squared c.o.v. enters the sum with
    the product-of-estimates weight.  An empty shared prefix is the constant
    estimator 1 and contributes zero.  Diagonal terms use the full path.
    """
    trimmed = trim_tree(tree, b)
    leaves = trimmed.leaves()
    paths = [leaf.path_from_root() for leaf in leaves]
    all_factors = [_leaf_factors(leaf, b) for leaf in leaves]
    estimates = [product_estimate(f).value for f in all_factors]
    if any(e == 0.0 for e in estimates):
        raise EstimateUndefinedError("c.o.v. undefined: a leaf estimate is zero")

    p = tree.config.p
    cov_sqs = [[factor_cov_sq(f, p) for f in factors] for factors in all_factors]
    total_weight = sum(estimates) ** 2
    acc = 0.0
    for i in range(len(leaves)):
        for j in range(len(leaves)):
            w = estimates[i] * estimates[j] / total_weight
            if i == j:
                delta_sq = sum(cov_sqs[i])
            else:
                shared = 0
                for a, c in zip(paths[i][1:], paths[j][1:]):
                    if a is not c:
                        break
                    shared += 1
                delta_sq = sum(cov_sqs[i][:shared])
            acc += w * delta_sq
    return math.sqrt(acc)


def sample_conditional(
    tree: BranchTree,
    b: float,
    count: int,
    rng: RngStream,
    chain_length: int | None = None,
) -> list[EvaluatedSample]:
    """Draw approximate samples from the input density conditioned on g >= b.

    Each draw picks a trimmed-tree leaf with probability proportional to its
    estimated contribution, starts a confined chain at a uniformly chosen
    qualifying leaf sample and emits the final state.  Chain evaluations are
    counted against the tree's performance function.
    """
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    trimmed = trim_tree(tree, b)
    leaves = trimmed.leaves()
    estimates = np.array(
        [product_estimate(_leaf_factors(leaf, b)).value for leaf in leaves]
    )
    total = estimates.sum()
    if total <= 0:
        raise EstimateUndefinedError(
            "conditional sampling requires a qualifying sample in some leaf"
        )
    weights = estimates / total
    qualifying = [
        [s for s in leaf.level.samples if s.performance >= b] for leaf in leaves
    ]
    steps = chain_length if chain_length is not None else tree.config.n_s
    pick_gen = rng.child(CONDITIONAL_STREAM, 0).generator()
    out = []
    for draw in range(count):
        leaf_idx = int(pick_gen.choice(len(leaves), p=weights))
        leaf = leaves[leaf_idx]
        pool = qualifying[leaf_idx]
        seed = pool[int(pick_gen.integers(len(pool)))]
        target = ChainTarget(
            model=tree.model, threshold=b, pf=tree.pf, constraint=leaf.region
        )
        chain = run_chain(
            seed,
            steps,
            target,
            tree.config.proposal,
            rng.child(CONDITIONAL_STREAM, 1, draw),
        )
        out.append(chain[-1])
    return out


def tree_to_dict(tree: BranchTree) -> dict:
    """JSON-ready tree description: per node the id, parent id, threshold
    (null encodes -inf), region clauses with classifier coefficients, the
    sample matrix and bookkeeping fields."""
    nodes = []
    for node in tree.nodes():
        clauses = []
        for clause in node.region.clauses:
            clf = clause.classifier
            clauses.append(
                {
                    "labels": [int(v) for v in clf.labels],
                    "weights": [[float(x) for x in row] for row in clf.weights],
                    "intercepts": [float(v) for v in clf.intercepts],
                    "required_label": int(clause.label),
                }
            )
        nodes.append(
            {
                "id": node.creation_index,
                "parent": node.parent.creation_index if node.parent else None,
                "threshold": None if math.isinf(node.threshold) else node.threshold,
                "depth": node.depth,
                "chain_count": node.chain_count,
                "graph_budget": node.graph_budget,
                "conditional_factor": node.conditional_factor,
                "stopped": node.stopped,
                "stop_reason": node.stop_reason,
                "region": clauses,
                "points": [[float(x) for x in s.point] for s in node.level.samples],
                "performances": [float(s.performance) for s in node.level.samples],
            }
        )
    return {
        "n": tree.config.n,
        "p": tree.config.p,
        "dim": tree.model.dim,
        "eval_count": tree.pf.eval_count,
        "nodes": nodes,
    }
