"""
Tests for Expected Improvement and the discrete candidate search.
"""

import math

import numpy as np
import pytest
from scipy.stats import norm

from acquisition import (
    AcquisitionSpec,
    expected_improvement,
    expected_improvement_many,
    propose,
    propose_clustered,
)
from exceptions import InvalidArgumentError
from gp_core import KernelParams, PosteriorGaussian, build_model
from multitask import (
    Cluster,
    ClusterSpec,
    TaskObservation,
    TaskRegistry,
    TaskSpec,
    fit_clustered,
)
from param_space import (
    Configuration,
    ParamSpace,
    ParamSpec,
    enumerate_configs,
    normalize_many,
    sample_configs,
)

FAST = {"starts": 2, "evals_per_start": 60}


def stratified_monte_carlo_ei(mean, std, best, rng, samples=10**6):
    """E[max(0, X - best)], X ~ N(mean, std^2), one uniform draw per probability stratum."""
    u = (np.arange(samples) + rng.uniform(size=samples)) / samples
    x = mean + std * norm.ppf(u)
    return float(np.mean(np.maximum(x - best, 0.0)))


def brute_force_argmax(model, space, best, xi=0.0):
    """EI of every configuration of the space; first maximum in enumeration order."""
    configs = enumerate_configs(space)
    means, variances = model.posterior_many(normalize_many(space, configs), 0)
    scores = expected_improvement_many(means, variances, best, xi)
    index = int(np.argmax(scores))
    return tuple(configs[index].tolist()), float(scores[index])


def random_model(space, rng, n=4):
    points = normalize_many(space, sample_configs(space, rng, n))
    params = KernelParams(
        rng.uniform(0.2, 1.0, size=space.dimension), rng.uniform(0.5, 2), rng.uniform(1e-4, 1e-2)
    )
    return build_model(points, rng.normal(size=n), None, params)


class TestExpectedImprovement:
    def test_no_uncertainty_no_improvement(self):
        assert expected_improvement(PosteriorGaussian(0.5, 0.0), 1.0) == 0.0
        assert expected_improvement(PosteriorGaussian(1.0, 0.0), 1.0) == 0.0
        assert expected_improvement(PosteriorGaussian(1.7, 0.0), 1.0) == pytest.approx(0.7)

    def test_at_incumbent(self):
        assert expected_improvement(PosteriorGaussian(2.0, 1.0), 2.0) == pytest.approx(
            1 / math.sqrt(2 * math.pi)
        )

    def test_tiny_sigma_limit(self):
        assert expected_improvement(PosteriorGaussian(3.0, 1e-18), 0.0) == pytest.approx(3.0)

    def test_jitter_shifts_the_incumbent(self):
        plain = expected_improvement(PosteriorGaussian(0.4, 0.25), 0.1)
        shifted = expected_improvement(PosteriorGaussian(0.4, 0.25), 0.0, xi=0.1)
        assert plain == pytest.approx(shifted)

    def test_matches_monte_carlo_grid(self, rng):
        for delta in (-2.0, -1.0, 0.0, 1.0, 2.0):
            for std in (0.1, 1.0, 3.0):
                closed = expected_improvement(PosteriorGaussian(delta, std**2), 0.0)
                estimate = stratified_monte_carlo_ei(delta, std, 0.0, rng)
                assert closed == pytest.approx(estimate, abs=1e-3)

    def test_non_negative_and_monotone_in_sigma(self):
        stds = np.linspace(0.0, 5.0, 51)
        for delta in np.linspace(-4, 4, 17):
            values = expected_improvement_many(np.full(51, delta), stds**2, 0.0)
            assert np.all(values >= 0)
            assert np.all(np.diff(values) >= -1e-12)


class TestAcquisitionSpec:
    def test_defaults(self):
        spec = AcquisitionSpec()
        assert (spec.jitter, spec.n_candidates, spec.n_neighbor_refinements) == (0.0, 2048, 64)

    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            AcquisitionSpec(n_candidates=0)
        with pytest.raises(InvalidArgumentError):
            AcquisitionSpec(jitter=-0.1)
        with pytest.raises(InvalidArgumentError):
            AcquisitionSpec(kind="upper-confidence-bound")
        with pytest.raises(InvalidArgumentError):
            AcquisitionSpec(cluster_head="sum")


class TestPropose:
    def test_exhaustive_single_parameter(self):
        space = ParamSpace([ParamSpec("x", 0, 10, 0)])
        params = KernelParams(np.array([0.2]), 1.0, 1e-6)
        model = build_model(
            np.array([[0.0], [0.5], [0.9]]), np.array([-1.0, 0.5, 0.2]), None, params
        )
        proposal = propose(model, space, 0.5, AcquisitionSpec(), rng_seed=1)
        expected, value = brute_force_argmax(model, space, 0.5)
        assert proposal.config.values == expected
        assert proposal.acquisition_value == pytest.approx(value)

    def test_moves_away_from_the_only_observation(self):
        space = ParamSpace([ParamSpec("x", 0, 10, 5)])
        params = KernelParams(np.array([0.3]), 1.0, 1e-8)
        model = build_model(np.array([[0.5]]), np.array([1.0]), None, params)
        proposal = propose(model, space, 1.0, AcquisitionSpec(), rng_seed=0)
        assert proposal.config.values != (5,)
        assert proposal.acquisition_value > 0

    def test_exhaustive_agreement_on_random_spaces(self, rng):
        for _ in range(20):
            dimension = int(rng.integers(1, 4))
            space = ParamSpace(
                [ParamSpec(f"p{d}", 0, int(rng.integers(2, 12)), 0) for d in range(dimension)]
            )
            assert space.cardinality() <= 2000
            model = random_model(space, rng)
            best = float(np.max(model.targets))
            proposal = propose(model, space, best, AcquisitionSpec(), rng_seed=3)
            expected, _ = brute_force_argmax(model, space, best)
            assert proposal.config.values == expected

    def test_same_seed_same_proposal(self, rocksdb, rng):
        model = random_model(rocksdb, rng, n=6)
        best = float(np.max(model.targets))
        spec = AcquisitionSpec(n_candidates=256, n_neighbor_refinements=32)
        first = propose(model, rocksdb, best, spec, rng_seed=42)
        second = propose(model, rocksdb, best, spec, rng_seed=42)
        assert first == second
        rocksdb.validate(first.config)

    def test_refinement_never_lowers_ei(self, rocksdb, rng):
        model = random_model(rocksdb, rng, n=6)
        best = float(np.max(model.targets))
        unrefined = AcquisitionSpec(n_candidates=64, n_neighbor_refinements=0)
        plain = propose(model, rocksdb, best, unrefined, 7)
        refined = propose(model, rocksdb, best, AcquisitionSpec(n_candidates=64), 7)
        assert refined.acquisition_value >= plain.acquisition_value

    def test_skips_evaluated_configurations(self, small_space, rng):
        model = random_model(small_space, rng)
        best = float(np.max(model.targets))
        first = propose(model, small_space, best, AcquisitionSpec(), 0)
        second = propose(model, small_space, best, AcquisitionSpec(), 0, evaluated=[first.config])
        assert second.config != first.config
        assert not second.duplicate
        assert second.acquisition_value <= first.acquisition_value

    def test_duplicate_when_everything_was_evaluated(self, rng):
        space = ParamSpace([ParamSpec("x", 0, 2, 0)])
        model = random_model(space, rng, n=2)
        evaluated = [Configuration((v,)) for v in range(3)]
        proposal = propose(model, space, 0.0, AcquisitionSpec(), 0, evaluated=evaluated)
        assert proposal.duplicate

    def test_dimension_mismatch(self, small_space, rocksdb, rng):
        model = random_model(small_space, rng)
        with pytest.raises(InvalidArgumentError):
            propose(model, rocksdb, 0.0, AcquisitionSpec(), 0)


class TestProposeClustered:
    @pytest.fixture
    def tasks(self):
        return TaskRegistry(
            [
                TaskSpec("perf", "maximize", True),
                TaskSpec("left", "minimize"),
                TaskSpec("right", "minimize"),
            ]
        )

    @pytest.fixture
    def space(self):
        return ParamSpace([ParamSpec("u", 0, 20, 0), ParamSpec("v", 0, 20, 0)])

    @pytest.fixture
    def history(self, space, rng):
        observations = []
        for u, v in sample_configs(space, rng, 6).tolist():
            left, right = (u / 20 - 0.7) ** 2, (v / 20 - 0.2) ** 2
            observations.append(
                TaskObservation(
                    Configuration((u, v)),
                    {"perf": 1.0 - left - right, "left": left, "right": right},
                )
            )
        return observations

    def test_single_cluster_matches_propose(self, space, tasks, history):
        spec = ClusterSpec((Cluster(("left", "right"), ("u", "v")),))
        (cm,) = fit_clustered(history, space, tasks, spec, seed=1, **FAST)
        best = cm.dataset.incumbent()
        acquisition = AcquisitionSpec(n_candidates=100)
        clustered = propose_clustered([cm], space, best, acquisition, rng_seed=5)
        whole = propose(cm.model, space, best, acquisition, 5, task=cm.primary_task)
        assert clustered.config == whole.config
        assert clustered.acquisition_value == pytest.approx(whole.acquisition_value)

    def test_concatenates_per_cluster_argmaxes(self, space, tasks, history):
        spec = ClusterSpec((Cluster(("left",), ("u",)), Cluster(("right",), ("v",))))
        models = fit_clustered(history, space, tasks, spec, **FAST)
        best = models[0].dataset.incumbent()
        proposal = propose_clustered(models, space, best, AcquisitionSpec(), rng_seed=9)
        expected_values = []
        expected_total = 0.0
        for cm in models:
            # each cluster is scored on its own task against that task's best value
            own = cm.guide_task
            task = cm.dataset.registry.index(own)
            own_best = cm.dataset.incumbent(own)
            part = propose(cm.model, cm.space, own_best, AcquisitionSpec(), 0, task=task)
            expected_values.extend(part.config.values)
            expected_total += part.acquisition_value
        assert proposal.config.values == tuple(expected_values)
        assert proposal.acquisition_value == pytest.approx(expected_total)

    def test_primary_head_mode(self, space, tasks, history):
        spec = ClusterSpec((Cluster(("left",), ("u",)), Cluster(("right",), ("v",))))
        models = fit_clustered(history, space, tasks, spec, **FAST)
        best = models[0].dataset.incumbent()
        acquisition = AcquisitionSpec(cluster_head="primary")
        proposal = propose_clustered(models, space, best, acquisition, rng_seed=9)
        parts = [
            propose(cm.model, cm.space, best, acquisition, 0, task=cm.primary_task)
            for cm in models
        ]
        assert proposal.config.values == parts[0].config.values + parts[1].config.values
        assert proposal.acquisition_value == pytest.approx(sum(p.acquisition_value for p in parts))

    def test_own_task_clusters_ignore_the_primary_incumbent(self, space, tasks, history):
        spec = ClusterSpec((Cluster(("left",), ("u",)), Cluster(("right",), ("v",))))
        models = fit_clustered(history, space, tasks, spec, **FAST)
        low = propose_clustered(models, space, -5.0, AcquisitionSpec(), rng_seed=3)
        high = propose_clustered(models, space, 5.0, AcquisitionSpec(), rng_seed=3)
        assert low == high

    def test_deterministic(self, space, tasks, history):
        spec = ClusterSpec((Cluster(("left",), ("u",)), Cluster(("right",), ("v",))))
        models = fit_clustered(history, space, tasks, spec, **FAST)
        acquisition = AcquisitionSpec(n_candidates=8, n_neighbor_refinements=4)
        first = propose_clustered(models, space, 0.0, acquisition, rng_seed=11)
        second = propose_clustered(models, space, 0.0, acquisition, rng_seed=11)
        assert first == second

    def test_avoids_evaluated_concatenation(self, space, tasks, history):
        spec = ClusterSpec((Cluster(("left",), ("u",)), Cluster(("right",), ("v",))))
        models = fit_clustered(history, space, tasks, spec, **FAST)
        best = models[0].dataset.incumbent()
        first = propose_clustered(models, space, best, AcquisitionSpec(), 0)
        second = propose_clustered(models, space, best, AcquisitionSpec(), 0, [first.config])
        assert second.config != first.config
        assert not second.duplicate
        changed = [a != b for a, b in zip(first.config.values, second.config.values)]
        assert sum(changed) == 1

    def test_models_must_cover_the_space(self, space, tasks, history):
        spec = ClusterSpec((Cluster(("left",), ("u",)), Cluster(("right",), ("v",))))
        models = fit_clustered(history, space, tasks, spec, **FAST)
        with pytest.raises(InvalidArgumentError, match="cover"):
            propose_clustered(models[:1], space, 0.0, AcquisitionSpec(), 0)
