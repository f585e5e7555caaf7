"""
Expected Improvement and the discrete candidate search that maximizes it.

Candidates are integer configurations, never continuous points rounded afterwards:
1. Draw `n_candidates` seeded uniform configurations, or enumerate the whole space when it
   is not larger than that
2. Hill-climb from the best candidate over single-coordinate ordinal steps (+-1 and +-1% of
   the range), at most `n_neighbor_refinements` extra scores
3. Return the EI maximizer, the lowest generation index winning ties, skipping
   configurations that were already evaluated unless every candidate was
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.stats import norm

from exceptions import InvalidArgumentError
from gp_core import GPModel, PosteriorGaussian
from multitask import ClusterModel
from param_space import (
    Configuration,
    ParamSpace,
    enumerate_configs,
    normalize_many,
    sample_configs,
)

logger = logging.getLogger(__name__)

EXPECTED_IMPROVEMENT = "expected-improvement"
GUIDE_HEAD = "guide"
PRIMARY_HEAD = "primary"


@dataclass(frozen=True)
class AcquisitionSpec:
    """
    Acquisition settings, the `acquisition` section of the tuner config file.

    Attributes:
        kind (str): Only "expected-improvement" is supported.
        jitter (float): Exploration margin xi subtracted from the improvement.
        n_candidates (int): Random candidates drawn per search.
        n_neighbor_refinements (int): Extra neighbor scores granted to the hill-climb.
        cluster_head (str): Head scored per cluster by propose_clustered, "guide" for the
            cluster's guide task or "primary" for the primary task.
    """

    kind: str = EXPECTED_IMPROVEMENT
    jitter: float = 0.0
    n_candidates: int = 2048
    n_neighbor_refinements: int = 64
    cluster_head: str = GUIDE_HEAD

    def __post_init__(self):
        if self.kind != EXPECTED_IMPROVEMENT:
            raise InvalidArgumentError(f"Unsupported acquisition kind: {self.kind}")
        if self.jitter < 0:
            raise InvalidArgumentError("Acquisition jitter must be non-negative")
        if self.n_candidates < 1:
            raise InvalidArgumentError("n_candidates must be at least 1")
        if self.n_neighbor_refinements < 0:
            raise InvalidArgumentError("n_neighbor_refinements must be non-negative")
        if self.cluster_head not in (GUIDE_HEAD, PRIMARY_HEAD):
            raise InvalidArgumentError(f"Unsupported cluster head: {self.cluster_head}")


@dataclass(frozen=True)
class Proposal:
    """
    Next configuration to evaluate.

    Attributes:
        config (Configuration): Valid configuration of the full space.
        acquisition_value (float): EI of the configuration (sum over clusters when clustered).
        duplicate (bool): True when every candidate had been evaluated already.
    """

    config: Configuration
    acquisition_value: float
    duplicate: bool = False


def expected_improvement_many(
    means: np.ndarray, variances: np.ndarray, best: float, xi: float = 0.0
) -> np.ndarray:
    """Closed-form EI for maximization, vectorized over posterior means and variances."""
    means = np.asarray(means, dtype=np.float64)
    sigma = np.sqrt(np.maximum(np.asarray(variances, dtype=np.float64), 0.0))
    delta = means - best - xi
    positive = sigma > 0
    u = np.divide(delta, sigma, out=np.zeros_like(delta), where=positive)
    ei = np.where(positive, delta * norm.cdf(u) + sigma * norm.pdf(u), np.maximum(delta, 0.0))
    return np.maximum(ei, 0.0)


def expected_improvement(post: PosteriorGaussian, best: float, xi: float = 0.0) -> float:
    """
    Expected improvement of a Gaussian posterior over the incumbent.

    EI = (mu - f* - xi) * Phi(z) + sigma * phi(z), z = (mu - f* - xi) / sigma;
    max(0, mu - f* - xi) when sigma = 0.

    Args:
        post (PosteriorGaussian): Posterior at the candidate.
        best (float): Incumbent standardized primary value f*.
        xi (float): Exploration margin.

    Returns:
        float: Non-negative EI.

    Example:
        expected_improvement(PosteriorGaussian(0.0, 1.0), 0.0)  # 0.3989...
    """
    return float(expected_improvement_many([post.mean], [post.variance], best, xi)[0])


def _step_sizes(space: ParamSpace) -> np.ndarray:
    """(D, 2) ordinal steps per parameter: 1 and max(1, 1% of the range)."""
    coarse = np.maximum(1, np.floor(0.01 * (space.uppers - space.lowers) + 0.5)).astype(np.int64)
    return np.stack([np.ones_like(coarse), coarse], axis=1)


def _neighbors(space: ParamSpace, center: np.ndarray, steps: np.ndarray) -> List[np.ndarray]:
    found = []
    seen = {tuple(center.tolist())}
    for d in range(space.dimension):
        for step in steps[d]:
            for direction in (-1, 1):
                candidate = center.copy()
                candidate[d] = np.clip(
                    candidate[d] + direction * step, space.lowers[d], space.uppers[d]
                )
                key = tuple(candidate.tolist())
                if key not in seen:
                    seen.add(key)
                    found.append(candidate)
    return found


class _CandidateSearch:
    """Scores candidate configurations of one (sub-)space under one posterior head."""

    def __init__(
        self,
        model: GPModel,
        space: ParamSpace,
        task: int,
        incumbent_best: float,
        spec: AcquisitionSpec,
    ):
        if model.dimension != space.dimension:
            raise InvalidArgumentError(
                f"Model of dimension {model.dimension} cannot score a space of dimension "
                f"{space.dimension}"
            )
        self.model = model
        self.space = space
        self.task = task
        self.best = incumbent_best
        self.spec = spec

    def score(self, candidates: np.ndarray) -> np.ndarray:
        means, variances = self.model.posterior_many(
            normalize_many(self.space, candidates), self.task
        )
        return expected_improvement_many(means, variances, self.best, self.spec.jitter)

    def run(self, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """
        Generates and scores candidates.

        Returns:
            tuple: (candidates (m, D) int64 in generation order, EI scores (m,))
        """
        exhaustive = self.space.cardinality() <= self.spec.n_candidates
        if exhaustive:
            candidates = enumerate_configs(self.space)
        else:
            candidates = sample_configs(self.space, rng, self.spec.n_candidates)
        scores = self.score(candidates)
        if exhaustive or self.spec.n_neighbor_refinements == 0:
            return candidates, scores

        pool = [candidates]
        pool_scores = [scores]
        best_index = int(np.argmax(scores))
        center, center_score = candidates[best_index], scores[best_index]
        steps = _step_sizes(self.space)
        budget = self.spec.n_neighbor_refinements
        while budget > 0:
            neighbors = _neighbors(self.space, center, steps)[:budget]
            if not neighbors:
                break
            batch = np.array(neighbors, dtype=np.int64)
            batch_scores = self.score(batch)
            budget -= batch.shape[0]
            pool.append(batch)
            pool_scores.append(batch_scores)
            top = int(np.argmax(batch_scores))
            if batch_scores[top] <= center_score:
                break
            center, center_score = batch[top], batch_scores[top]
        return np.concatenate(pool), np.concatenate(pool_scores)


def _ranking(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep generation order."""
    return np.argsort(-scores, kind="stable")


def _evaluated_keys(evaluated: Optional[Iterable[Configuration]]) -> Set[Tuple[int, ...]]:
    return set() if evaluated is None else {tuple(c.values) for c in evaluated}


def propose(
    model: GPModel,
    space: ParamSpace,
    incumbent_best: float,
    spec: AcquisitionSpec,
    rng_seed: int,
    task: int = 0,
    evaluated: Optional[Iterable[Configuration]] = None,
) -> Proposal:
    """
    Picks the configuration maximizing EI of one posterior head.

    Args:
        model (GPModel): Fitted surrogate over the unit cube of `space`.
        space (ParamSpace): Space to search.
        incumbent_best (float): Best standardized primary value observed so far.
        spec (AcquisitionSpec): Candidate search settings.
        rng_seed (int): Seed of the candidate generator.
        task (int): Task head scored by EI (the primary task).
        evaluated (Optional[Iterable[Configuration]]): Configurations to avoid re-proposing.

    Returns:
        Proposal: The EI maximizer, deterministic given the seed.

    Raises:
        InvalidArgumentError: If the model and space dimensions differ.
    """
    search = _CandidateSearch(model, space, task, incumbent_best, spec)
    candidates, scores = search.run(np.random.default_rng(rng_seed))
    seen = _evaluated_keys(evaluated)
    order = _ranking(scores)
    for index in order:
        key = tuple(candidates[index].tolist())
        if key not in seen:
            return Proposal(Configuration(key), float(scores[index]))
    index = order[0]
    logger.info("Every candidate was evaluated before, proposing a duplicate")
    return Proposal(Configuration(tuple(candidates[index].tolist())), float(scores[index]), True)


def _check_coverage(models: Sequence[ClusterModel], space: ParamSpace) -> None:
    covered = np.concatenate([np.asarray(cm.indices, dtype=int) for cm in models])
    if covered.shape[0] != space.dimension or not np.array_equal(
        np.sort(covered), np.arange(space.dimension)
    ):
        raise InvalidArgumentError(
            "Cluster models must cover every parameter of the space exactly once"
        )
    for cm in models:
        if cm.space.params != tuple(space.params[i] for i in cm.indices):
            raise InvalidArgumentError("Cluster sub-space does not match the full space")


def propose_clustered(
    models: Sequence[ClusterModel],
    space: ParamSpace,
    incumbent_best: float,
    spec: AcquisitionSpec,
    rng_seed: int,
    evaluated: Optional[Iterable[Configuration]] = None,
) -> Proposal:
    """
    Runs the candidate search per cluster and concatenates the sub-configuration argmaxes.

    Cluster i draws its candidates with seed `rng_seed + i` and scores EI on the head of
    its guide task (see ClusterModel.guide_task), or on the primary head when
    `spec.cluster_head` is "primary". A cluster steered by its own task measures
    improvement against that task's best standardized value; a cluster steered by the
    primary uses `incumbent_best`. When the concatenation was already evaluated, the single
    substitution of a cluster's next-ranked candidate costing the least EI is taken instead.

    Args:
        models (Sequence[ClusterModel]): Fitted cluster models covering the space.
        space (ParamSpace): Full space.
        incumbent_best (float): Best standardized primary value observed so far.
        spec (AcquisitionSpec): Candidate search settings.
        rng_seed (int): Base seed of the candidate generators.
        evaluated (Optional[Iterable[Configuration]]): Configurations to avoid re-proposing.

    Returns:
        Proposal: acquisition_value is the sum of the per-cluster EI values.

    Raises:
        InvalidArgumentError: If the cluster models do not cover the space.
    """
    if not models:
        raise InvalidArgumentError("No cluster models to propose from")
    _check_coverage(models, space)

    rankings = []
    for i, cm in enumerate(models):
        head = cm.guide_task
        if spec.cluster_head == PRIMARY_HEAD:
            head = cm.dataset.registry.primary.name
        task = cm.dataset.registry.index(head)
        best = incumbent_best if task == cm.primary_task else cm.dataset.incumbent(head)
        search = _CandidateSearch(cm.model, cm.space, task, best, spec)
        candidates, scores = search.run(np.random.default_rng(rng_seed + i))
        order = _ranking(scores)
        rankings.append((candidates[order], scores[order]))

    def assemble(picks: Sequence[int]) -> Tuple[Tuple[int, ...], float]:
        values = np.empty(space.dimension, dtype=np.int64)
        total = 0.0
        for cm, (candidates, scores), pick in zip(models, rankings, picks):
            values[cm.indices] = candidates[pick]
            total += float(scores[pick])
        return tuple(values.tolist()), total

    seen = _evaluated_keys(evaluated)
    top = [0] * len(models)
    key, total = assemble(top)
    if key not in seen:
        return Proposal(Configuration(key), total)

    alternatives = sorted(
        (float(scores[0] - scores[rank]), c, rank)
        for c, (_, scores) in enumerate(rankings)
        for rank in range(1, scores.shape[0])
    )
    for _, c, rank in alternatives:
        picks = list(top)
        picks[c] = rank
        candidate_key, candidate_total = assemble(picks)
        if candidate_key not in seen:
            return Proposal(Configuration(candidate_key), candidate_total)
    logger.info("Every clustered candidate was evaluated before, proposing a duplicate")
    return Proposal(Configuration(key), total, True)
