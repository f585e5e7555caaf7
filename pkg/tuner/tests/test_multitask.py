"""
Tests for the multi-task dataset pipeline, the ICM fit and the clustered fit.
"""

import numpy as np
import pytest

from acquisition import AcquisitionSpec, propose
from exceptions import InvalidArgumentError
from gp_core import KernelParams, TaskKernel, fit
from multitask import (
    ROCKSDB_TASKS,
    Cluster,
    ClusterSpec,
    TaskObservation,
    TaskRegistry,
    TaskSpec,
    build_dataset,
    default_rocksdb_clusters,
    describe_task_matrix,
    fit_clustered,
    fit_multitask,
    fit_surrogate_for,
    residuals,
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


def observations(space, tasks, rng, n):
    history = []
    for row in sample_configs(space, rng, n):
        values = {name: float(rng.normal(10, 3)) for name in tasks.names}
        history.append(TaskObservation(Configuration(tuple(row.tolist())), values))
    return history


class TestTaskRegistry:
    def test_exactly_one_primary(self):
        with pytest.raises(InvalidArgumentError, match="primary"):
            TaskRegistry([TaskSpec("a", "maximize"), TaskSpec("b", "minimize")])
        with pytest.raises(InvalidArgumentError, match="primary"):
            TaskRegistry([TaskSpec("a", "maximize", True), TaskSpec("b", "minimize", True)])

    def test_bad_direction(self):
        with pytest.raises(InvalidArgumentError, match="direction"):
            TaskSpec("a", "up")

    def test_subset_keeps_registry_order(self):
        subset = ROCKSDB_TASKS.subset(["read_block_get_p99", "iops"])
        assert subset.names == ["iops", "read_block_get_p99"]
        assert subset.primary.name == "iops"

    def test_rocksdb_tasks(self):
        assert ROCKSDB_TASKS.primary.name == "iops"
        assert len(ROCKSDB_TASKS) == 4
        assert ROCKSDB_TASKS.tasks[1].sign == -1


class TestBuildDataset:
    def test_maximized_pair(self, small_space, two_tasks):
        history = [
            TaskObservation(Configuration((0, 0)), {"throughput": 10.0, "latency": 2.0}),
            TaskObservation(Configuration((10, 4)), {"throughput": 20.0, "latency": 4.0}),
        ]
        dataset = build_dataset(history, small_space, two_tasks)
        assert dataset.column("throughput").tolist() == pytest.approx([-1.0, 1.0])
        assert dataset.stats["throughput"].std == pytest.approx(5.0)
        # latency is minimized: flipped to {-2, -4} before standardizing
        assert dataset.column("latency").tolist() == pytest.approx([1.0, -1.0])

    def test_rows_are_observation_major(self, small_space, two_tasks):
        history = [
            TaskObservation(Configuration((0, 0)), {"throughput": 1.0, "latency": 5.0}),
            TaskObservation(Configuration((5, 2)), {"throughput": 3.0, "latency": 1.0}),
            TaskObservation(Configuration((10, 4)), {"throughput": 2.0, "latency": 3.0}),
        ]
        dataset = build_dataset(history, small_space, two_tasks)
        assert dataset.targets.shape == (6,)
        assert dataset.tasks.tolist() == [0, 1, 0, 1, 0, 1]
        assert np.array_equal(dataset.inputs[0], dataset.inputs[1])
        assert dataset.inputs[2].tolist() == [0.5, 0.5]
        assert dataset.num_observations == 3

    def test_standardized_moments(self, rocksdb, rocksdb_tasks, rng):
        for _ in range(10):
            n = int(rng.integers(2, 30))
            history = observations(rocksdb, rocksdb_tasks, rng, n)
            dataset = build_dataset(history, rocksdb, rocksdb_tasks)
            assert dataset.targets.shape == (n * len(rocksdb_tasks),)
            for name in rocksdb_tasks.names:
                column = dataset.column(name)
                assert abs(np.mean(column)) < 1e-9
                assert abs(np.var(column) - 1.0) < 1e-9

    def test_sign_flip_orders_better_values_higher(self, rocksdb, rocksdb_tasks, rng):
        history = observations(rocksdb, rocksdb_tasks, rng, 12)
        dataset = build_dataset(history, rocksdb, rocksdb_tasks)
        for task in rocksdb_tasks:
            raw = np.array([o.values[task.name] for o in history])
            z = dataset.column(task.name)
            better = task.sign * raw
            for i in range(len(history)):
                for j in range(len(history)):
                    if better[i] > better[j]:
                        assert z[i] > z[j]

    def test_single_observation_falls_back(self, small_space, two_tasks):
        history = [TaskObservation(Configuration((3, 1)), {"throughput": 7.0, "latency": 2.0})]
        dataset = build_dataset(history, small_space, two_tasks)
        assert dataset.targets.tolist() == [0.0, 0.0]
        assert dataset.stats.fallback_tasks == ["throughput", "latency"]
        assert dataset.incumbent() == 0.0

    def test_missing_task_value(self, small_space, two_tasks):
        history = [TaskObservation(Configuration((3, 1)), {"throughput": 7.0})]
        with pytest.raises(InvalidArgumentError, match="latency"):
            build_dataset(history, small_space, two_tasks)

    def test_empty_history(self, small_space, two_tasks):
        with pytest.raises(InvalidArgumentError):
            build_dataset([], small_space, two_tasks)


class TestFitMultitask:
    def test_single_task_equals_plain_gp(self, small_space, rng):
        tasks = TaskRegistry([TaskSpec("throughput", "maximize", True)])
        dataset = build_dataset(observations(small_space, tasks, rng, 6), small_space, tasks)
        model = fit_multitask(dataset, seed=4, **FAST)
        plain = fit(dataset.inputs, dataset.targets, seed=4, **FAST)
        assert model.task_kernel is None
        query = np.array([0.3, 0.6])
        assert model.posterior(query).mean == pytest.approx(plain.posterior(query).mean)

    def test_four_tasks_give_24_rows(self, rocksdb, rocksdb_tasks, rng):
        history = observations(rocksdb, rocksdb_tasks, rng, 6)
        dataset = build_dataset(history, rocksdb, rocksdb_tasks)
        model = fit_multitask(dataset, **FAST)
        assert model.n == 24
        assert model.task_matrix.shape == (4, 4)
        matrix = describe_task_matrix(model, rocksdb_tasks)
        assert list(matrix) == rocksdb_tasks.names
        assert matrix["iops"]["write_amplification"] == pytest.approx(
            matrix["write_amplification"]["iops"]
        )

    def test_four_tasks_match_a_dense_oracle(self, rocksdb, rocksdb_tasks, rng):
        history = observations(rocksdb, rocksdb_tasks, rng, 6)
        dataset = build_dataset(history, rocksdb, rocksdb_tasks)
        model = fit_multitask(dataset, **FAST)
        B = model.task_matrix
        scaled = dataset.inputs / model.params.lengthscales

        def k(A, C, ta, tc):
            sq = np.sum((A[:, None, :] - C[None, :, :]) ** 2, axis=2)
            return model.params.signal_variance * np.exp(-0.5 * sq) * B[np.ix_(ta, tc)]

        K = k(scaled, scaled, dataset.tasks, dataset.tasks)
        K += model.diagonal_noise * np.eye(24)
        residual = dataset.targets - model.mean
        queries = rng.uniform(size=(10, rocksdb.dimension))
        for task in range(4):
            K_star = k(scaled, queries / model.params.lengthscales, dataset.tasks, [task] * 10)
            expected_means = model.mean + K_star.T @ np.linalg.solve(K, residual)
            expected_variances = model.params.signal_variance * B[task, task] - np.sum(
                K_star * np.linalg.solve(K, K_star), axis=0
            )
            means, variances = model.posterior_many(queries, task)
            np.testing.assert_allclose(means, expected_means, rtol=1e-8, atol=1e-8)
            np.testing.assert_allclose(
                variances, np.maximum(expected_variances, 0), rtol=1e-8, atol=1e-8
            )

    def test_primary_mean_reproduces_training_values(self, rocksdb, rocksdb_tasks, rng):
        history = observations(rocksdb, rocksdb_tasks, rng, 6)
        dataset = build_dataset(history, rocksdb, rocksdb_tasks)
        model = fit_multitask(
            dataset,
            params=KernelParams(np.full(rocksdb.dimension, 0.5), 1.0, 1e-6),
            task_kernel=TaskKernel(np.full((4, 1), 0.6), np.full(4, 0.2)),
            optimize=False,
        )
        primary = rocksdb_tasks.primary_index
        means, _ = model.posterior_many(dataset.points, primary)
        np.testing.assert_allclose(means, dataset.column("iops"), atol=1e-3)

    def test_affine_change_of_a_task_keeps_the_argmax(self, small_space, two_tasks, rng):
        history = observations(small_space, two_tasks, rng, 6)
        # throughput in other units, shifted by a constant
        rescaled = []
        for o in history:
            values = dict(o.values, throughput=3.5 * o.values["throughput"] + 1e3)
            rescaled.append(TaskObservation(o.config, values))
        fixed = {
            "params": KernelParams(np.array([0.3, 0.5]), 1.0, 1e-3),
            "task_kernel": TaskKernel(np.array([[0.7], [-0.4]]), [0.2, 0.3]),
            "optimize": False,
        }
        configs = enumerate_configs(small_space)
        picks = []
        for observed in (history, rescaled):
            dataset = build_dataset(observed, small_space, two_tasks)
            model = fit_multitask(dataset, **fixed)
            means, _ = model.posterior_many(normalize_many(small_space, configs), 0)
            proposal = propose(model, small_space, dataset.incumbent(), AcquisitionSpec(), 0)
            picks.append((int(np.argmax(means)), proposal.config))
        assert picks[0] == picks[1]

    def test_residuals_have_one_column_per_task(self, small_space, two_tasks, rng):
        dataset, model = fit_surrogate_for(
            observations(small_space, two_tasks, rng, 5), small_space, two_tasks, **FAST
        )
        found = residuals(dataset, model)
        assert list(found) == ["throughput", "latency"]
        assert all(values.shape == (5,) for values in found.values())

    def test_primary_only_surrogate(self, small_space, two_tasks, rng):
        dataset, model = fit_surrogate_for(
            observations(small_space, two_tasks, rng, 5),
            small_space,
            two_tasks,
            primary_only=True,
            **FAST,
        )
        assert dataset.registry.names == ["throughput"]
        assert model.num_tasks == 1


class TestClusterSpec:
    def test_default_rocksdb_clusters_cover_the_space(self, rocksdb, rocksdb_tasks):
        clusters = default_rocksdb_clusters()
        clusters.validate(rocksdb, rocksdb_tasks)
        owned = [name for cluster in clusters for name in cluster.params]
        assert sorted(owned) == sorted(rocksdb.names)
        by_task = {cluster.tasks[0]: cluster.params for cluster in clusters}
        assert by_task["read_block_get_p99"] == ("block_size",)
        assert "write_buffer_size" in by_task["level0_to_level1_p99"]
        assert "max_write_buffer_number" in by_task["level0_to_level1_p99"]

    def test_overlap_rejected(self, small_space, two_tasks):
        spec = ClusterSpec((Cluster(("latency",), ("a", "b")), Cluster((), ("b",))))
        with pytest.raises(InvalidArgumentError, match="overlapping"):
            spec.validate(small_space, two_tasks)

    def test_uncovered_parameter_rejected(self, small_space, two_tasks):
        spec = ClusterSpec((Cluster(("latency",), ("a",)),))
        with pytest.raises(InvalidArgumentError, match="not covered"):
            spec.validate(small_space, two_tasks)

    def test_task_without_cluster_rejected(self, small_space, two_tasks):
        spec = ClusterSpec((Cluster((), ("a", "b")),))
        with pytest.raises(InvalidArgumentError, match="latency"):
            spec.validate(small_space, two_tasks)


class TestFitClustered:
    @pytest.fixture
    def six_params(self):
        return ParamSpace([ParamSpec(f"p{i}", 0, 20, 10) for i in range(6)])

    @pytest.fixture
    def three_tasks(self):
        return TaskRegistry(
            [
                TaskSpec("perf", "maximize", True),
                TaskSpec("left", "minimize"),
                TaskSpec("right", "minimize"),
            ]
        )

    def test_single_cluster_matches_fit_multitask(self, small_space, two_tasks, rng):
        history = observations(small_space, two_tasks, rng, 5)
        spec = ClusterSpec((Cluster(("latency",), ("a", "b")),))
        (cm,) = fit_clustered(history, small_space, two_tasks, spec, seed=9, **FAST)
        dataset = build_dataset(history, small_space, two_tasks)
        whole = fit_multitask(dataset, seed=9, **FAST)
        query = np.array([0.2, 0.9])
        assert cm.model.posterior(query, 0).mean == pytest.approx(whole.posterior(query, 0).mean)
        assert cm.model.posterior(query, 0).variance == pytest.approx(
            whole.posterior(query, 0).variance
        )

    def test_cluster_models_see_only_their_parameters(self, six_params, three_tasks, rng):
        history = observations(six_params, three_tasks, rng, 8)
        spec = ClusterSpec(
            (
                Cluster(("left",), ("p0", "p1", "p2")),
                Cluster(("right",), ("p3", "p4", "p5")),
            )
        )
        models = fit_clustered(history, six_params, three_tasks, spec, **FAST)
        assert [cm.model.dimension for cm in models] == [3, 3]
        assert models[0].dataset.registry.names == ["perf", "left"]
        assert models[1].indices.tolist() == [3, 4, 5]
        assert models[1].primary_task == 0

    def test_guide_task(self, six_params, three_tasks, rng):
        history = observations(six_params, three_tasks, rng, 4)
        spec = ClusterSpec(
            (
                Cluster(("left",), ("p0", "p1")),
                Cluster(("perf",), ("p2", "p3")),
                Cluster(("right",), ("p4", "p5")),
            )
        )
        models = fit_clustered(history, six_params, three_tasks, spec, **FAST)
        assert [cm.guide_task for cm in models] == ["left", "perf", "right"]
        shared = ClusterSpec((Cluster(("left", "right"), tuple(six_params.names)),))
        (cm,) = fit_clustered(history, six_params, three_tasks, shared, **FAST)
        assert cm.guide_task == "perf"

    def test_matches_isolated_fits(self, six_params, three_tasks, rng):
        history = observations(six_params, three_tasks, rng, 8)
        spec = ClusterSpec(
            (
                Cluster(("left",), ("p0", "p1", "p2")),
                Cluster(("right",), ("p3", "p4", "p5")),
            )
        )
        models = fit_clustered(history, six_params, three_tasks, spec, seed=2, **FAST)
        for i, cm in enumerate(models):
            isolated = fit_multitask(cm.dataset, seed=2 + i, **FAST)
            query = rng.uniform(size=3)
            assert cm.model.posterior(query, 0).mean == pytest.approx(
                isolated.posterior(query, 0).mean, rel=1e-8
            )

    def test_invalid_clusters_rejected(self, six_params, three_tasks, rng):
        history = observations(six_params, three_tasks, rng, 3)
        spec = ClusterSpec((Cluster(("left", "right"), ("p0", "p9")),))
        with pytest.raises(InvalidArgumentError):
            fit_clustered(history, six_params, three_tasks, spec, **FAST)
