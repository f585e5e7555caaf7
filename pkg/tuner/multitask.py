"""
Multi-task modelling of the tuning history.

The history of evaluated configurations is turned into a stacked multi-task dataset:
1. Normalize every configuration to the unit cube
2. Flip the sign of minimized tasks so that larger is always better
3. Standardize each task to zero mean and unit (population) variance
4. Stack (point, task id, standardized value) rows, observation-major, task-minor

The stacked rows feed one ICM Gaussian process (`fit_multitask`), or, after splitting the
parameters into clusters, one smaller GP per cluster (`fit_clustered`). The primary task
joins every cluster so each cluster model can score primary improvement.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import FIT_WORKERS
from exceptions import InvalidArgumentError
from gp_core import GPModel, fit
from param_space import Configuration, ParamSpace, normalize_many, subspace

logger = logging.getLogger(__name__)

DIRECTIONS = ("maximize", "minimize")

# Below this a task's spread is treated as zero and sigma falls back to 1.
SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class TaskSpec:
    """
    One optimization target.

    Attributes:
        name (str): Identifier, e.g. "iops".
        direction (str): "maximize" or "minimize".
        is_primary (bool): Whether this is the objective the tuner optimizes.
    """

    name: str
    direction: str
    is_primary: bool = False

    def __post_init__(self):
        if not self.name:
            raise InvalidArgumentError("Task name must be non-empty")
        if self.direction not in DIRECTIONS:
            raise InvalidArgumentError(
                f"Task {self.name}: direction must be one of {DIRECTIONS}, got {self.direction!r}"
            )

    @property
    def sign(self) -> int:
        return 1 if self.direction == "maximize" else -1


class TaskRegistry:
    """
    Ordered task list with exactly one primary task.

    Attributes:
        tasks (Tuple[TaskSpec, ...]): Tasks in id order.
    """

    def __init__(self, tasks: Sequence[TaskSpec]):
        tasks = tuple(tasks)
        if not tasks:
            raise InvalidArgumentError("A task registry needs at least one task")
        names = [t.name for t in tasks]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"Duplicate task names in {names}")
        primaries = [t.name for t in tasks if t.is_primary]
        if len(primaries) != 1:
            raise InvalidArgumentError(
                f"Exactly one task must be primary, found {len(primaries)}: {primaries}"
            )
        self.tasks = tasks
        self._index = {name: i for i, name in enumerate(names)}

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[TaskSpec]:
        return iter(self.tasks)

    def __eq__(self, other) -> bool:
        return isinstance(other, TaskRegistry) and self.tasks == other.tasks

    def __repr__(self) -> str:
        return f"TaskRegistry({self.names})"

    @property
    def names(self) -> List[str]:
        return [t.name for t in self.tasks]

    @property
    def primary_index(self) -> int:
        return next(i for i, t in enumerate(self.tasks) if t.is_primary)

    @property
    def primary(self) -> TaskSpec:
        return self.tasks[self.primary_index]

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise InvalidArgumentError(f"Unknown task: {name}") from None

    def subset(self, names: Sequence[str]) -> "TaskRegistry":
        """Registry restricted to `names` (kept in registry order); must keep the primary."""
        wanted = set(names)
        unknown = sorted(wanted - set(self.names))
        if unknown:
            raise InvalidArgumentError(f"Unknown tasks: {unknown}")
        return TaskRegistry([t for t in self.tasks if t.name in wanted])

    def to_json(self) -> List[Dict[str, Any]]:
        return [
            {"name": t.name, "direction": t.direction, "primary": t.is_primary}
            for t in self.tasks
        ]


ROCKSDB_TASKS = TaskRegistry(
    [
        TaskSpec("iops", "maximize", is_primary=True),
        TaskSpec("write_amplification", "minimize"),
        TaskSpec("read_block_get_p99", "minimize"),  # microseconds
        TaskSpec("level0_to_level1_p99", "minimize"),  # microseconds
    ]
)


def registry_from_json(document: Sequence[Mapping[str, Any]]) -> TaskRegistry:
    """Builds a registry from an array of {name, direction, primary} objects."""
    return TaskRegistry(
        [
            TaskSpec(entry["name"], entry["direction"], bool(entry.get("primary", False)))
            for entry in document
        ]
    )


@dataclass(frozen=True)
class TaskObservation:
    """
    One complete measurement: a configuration and a value for every registered task.
    """

    config: Configuration
    values: Mapping[str, float]


@dataclass(frozen=True)
class TaskStats:
    """Standardization of one task: z = (sign * raw - mean) / std."""

    mean: float
    std: float
    sign: int
    fallback: bool = False

    def standardize(self, raw):
        return (self.sign * np.asarray(raw, dtype=np.float64) - self.mean) / self.std


@dataclass(frozen=True)
class StandardizationStats:
    """Per-task mean, sigma and sign used to build a dataset."""

    per_task: Mapping[str, TaskStats]

    def __getitem__(self, task: str) -> TaskStats:
        return self.per_task[task]

    @property
    def fallback_tasks(self) -> List[str]:
        return [name for name, stats in self.per_task.items() if stats.fallback]


@dataclass(frozen=True, eq=False)
class MultiTaskDataset:
    """
    Stacked training rows for a multi-task GP.

    Attributes:
        inputs (np.ndarray): (N*T, D) unit-cube points, observation-major.
        tasks (np.ndarray): (N*T,) task ids, task-minor.
        targets (np.ndarray): (N*T,) standardized values, larger is better.
        stats (StandardizationStats): How each task was standardized.
        registry (TaskRegistry): Task ids refer to this registry.
        space (ParamSpace): Space the points were normalized with.
    """

    inputs: np.ndarray
    tasks: np.ndarray
    targets: np.ndarray
    stats: StandardizationStats
    registry: TaskRegistry
    space: ParamSpace

    @property
    def num_tasks(self) -> int:
        return len(self.registry)

    @property
    def num_observations(self) -> int:
        return self.targets.shape[0] // self.num_tasks

    @property
    def points(self) -> np.ndarray:
        """(N, D) one unit-cube point per observation."""
        return self.inputs[:: self.num_tasks]

    def column(self, task: str) -> np.ndarray:
        """Standardized values of one task, in observation order."""
        return self.targets[self.tasks == self.registry.index(task)]

    def incumbent(self, task: Optional[str] = None) -> float:
        """Best standardized value of a task (the primary by default), the f* of EI."""
        return float(np.max(self.column(task or self.registry.primary.name)))


def build_dataset(
    history: Sequence[TaskObservation], space: ParamSpace, tasks: TaskRegistry
) -> MultiTaskDataset:
    """
    Normalizes, sign-flips, standardizes and stacks complete observations.

    Args:
        history (Sequence[TaskObservation]): Complete observations, failed trials excluded.
        space (ParamSpace): Space of the configurations.
        tasks (TaskRegistry): Tasks to stack, in id order.

    Returns:
        MultiTaskDataset: N * T rows.

    Raises:
        InvalidArgumentError: If the history is empty or an observation misses a task.

    Example:
        dataset = build_dataset(observations, rocksdb_space(), ROCKSDB_TASKS)
    """
    if not history:
        raise InvalidArgumentError("Cannot build a dataset from an empty history")
    raw = np.empty((len(history), len(tasks)), dtype=np.float64)
    for i, observation in enumerate(history):
        space.validate(observation.config)
        for t, task in enumerate(tasks):
            if task.name not in observation.values:
                raise InvalidArgumentError(f"Observation {i} has no value for task {task.name}")
            raw[i, t] = float(observation.values[task.name])
    if not np.all(np.isfinite(raw)):
        raise InvalidArgumentError("Observations must hold finite task values")

    standardized = np.empty_like(raw)
    per_task = {}
    for t, task in enumerate(tasks):
        flipped = task.sign * raw[:, t]
        mean = float(np.mean(flipped))
        std = float(np.std(flipped))
        fallback = std < SIGMA_FLOOR
        if fallback:
            std = 1.0
        stats = TaskStats(mean, std, task.sign, fallback)
        per_task[task.name] = stats
        standardized[:, t] = stats.standardize(raw[:, t])

    points = normalize_many(space, np.array([o.config.values for o in history], dtype=np.int64))
    num_tasks = len(tasks)
    return MultiTaskDataset(
        inputs=np.repeat(points, num_tasks, axis=0),
        tasks=np.tile(np.arange(num_tasks), len(history)),
        targets=standardized.reshape(-1),
        stats=StandardizationStats(per_task),
        registry=tasks,
        space=space,
    )


def fit_multitask(dataset: MultiTaskDataset, seed: int = 0, **fit_options) -> GPModel:
    """
    Fits one ICM GP over every (point, task) row of the dataset.

    A single-task dataset gets a plain GP (B is identically 1).

    Raises:
        NumericalFailureError: Propagated from the GP fit.
    """
    num_tasks = dataset.num_tasks if dataset.num_tasks > 1 else None
    return fit(
        dataset.inputs,
        dataset.targets,
        dataset.tasks,
        num_tasks=num_tasks,
        seed=seed,
        **fit_options,
    )


@dataclass(frozen=True)
class Cluster:
    """
    Tasks and the parameters assigned to them.

    Attributes:
        tasks (Tuple[str, ...]): Task names owned by the cluster.
        params (Tuple[str, ...]): Parameter names owned by the cluster.
    """

    tasks: Tuple[str, ...]
    params: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "params", tuple(self.params))
        if not self.params:
            raise InvalidArgumentError("A cluster needs at least one parameter")

    def to_json(self) -> Dict[str, List[str]]:
        return {"tasks": list(self.tasks), "params": list(self.params)}


@dataclass(frozen=True)
class ClusterSpec:
    """Decomposition of the space: each cluster owns disjoint parameters and its tasks."""

    clusters: Tuple[Cluster, ...]

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        if not self.clusters:
            raise InvalidArgumentError("A cluster spec needs at least one cluster")

    def __iter__(self) -> Iterator[Cluster]:
        return iter(self.clusters)

    def __len__(self) -> int:
        return len(self.clusters)

    def validate(self, space: ParamSpace, tasks: TaskRegistry) -> None:
        """
        Checks names, disjointness, coverage and task ownership.

        Every non-primary task must belong to exactly one cluster; the primary task may be
        listed anywhere since it joins every cluster anyway.

        Raises:
            InvalidArgumentError: Naming the offending cluster, parameter or task.
        """
        owner: Dict[str, int] = {}
        for i, cluster in enumerate(self.clusters):
            for name in cluster.params:
                space.index(name)
                if name in owner:
                    raise InvalidArgumentError(
                        f"Parameter {name} is assigned to clusters {owner[name]} and {i}; "
                        "overlapping clusters are not supported"
                    )
                owner[name] = i
            for name in cluster.tasks:
                tasks.index(name)
        missing = [name for name in space.names if name not in owner]
        if missing:
            raise InvalidArgumentError(f"Parameters not covered by any cluster: {missing}")
        primary = tasks.primary.name
        for task in tasks.names:
            if task == primary:
                continue
            holders = [i for i, c in enumerate(self.clusters) if task in c.tasks]
            if len(holders) != 1:
                raise InvalidArgumentError(
                    f"Task {task} must belong to exactly one cluster, found {holders}"
                )

    def to_json(self) -> List[Dict[str, List[str]]]:
        return [c.to_json() for c in self.clusters]


def cluster_spec_from_json(document: Sequence[Mapping[str, Any]]) -> ClusterSpec:
    return ClusterSpec(tuple(Cluster(entry["tasks"], entry["params"]) for entry in document))


def default_rocksdb_clusters() -> ClusterSpec:
    """
    Default decomposition of the RocksDB space, built from the documented parameter roles.

    This is a reconstruction; override it through the `clusters` section of the config file.
    - level0 / flush: memtable sizing and flushing drive level0 -> level1 compaction time
    - compaction / write amplification: compaction threads, level fan-out, stall triggers
    - read: block size sets how much is read per block lookup
    """
    return ClusterSpec(
        (
            Cluster(
                ("level0_to_level1_p99",),
                (
                    "write_buffer_size",
                    "max_write_buffer_number",
                    "min_write_buffer_number_to_merge",
                    "max_background_flushes",
                    "level0_file_num_compaction_trigger",
                ),
            ),
            Cluster(
                ("write_amplification",),
                (
                    "max_background_compactions",
                    "max_bytes_for_level_multiplier",
                    "level0_slowdown_writes_trigger",
                    "level0_stop_writes_trigger",
                ),
            ),
            Cluster(("read_block_get_p99",), ("block_size",)),
        )
    )


@dataclass(frozen=True, eq=False)
class ClusterModel:
    """
    Fitted surrogate of one cluster.

    Attributes:
        cluster (Cluster): The cluster definition.
        space (ParamSpace): The cluster's projected sub-space.
        indices (np.ndarray): Positions of the sub-space parameters in the full space.
        dataset (MultiTaskDataset): Projected training rows (cluster tasks + primary).
        model (GPModel): GP fitted on the projected rows.
    """

    cluster: Cluster
    space: ParamSpace
    indices: np.ndarray
    dataset: MultiTaskDataset
    model: GPModel

    @property
    def primary_task(self) -> int:
        return self.dataset.registry.primary_index

    @property
    def guide_task(self) -> str:
        """
        Task whose head scores the cluster's candidates.

        A cluster owning exactly one task besides the primary is steered by that task, which
        responds to the cluster's parameters only. Any other cluster is steered by the primary.
        """
        registry = self.dataset.registry
        owned = [name for name in registry.names if name != registry.primary.name]
        return owned[0] if len(owned) == 1 else registry.primary.name


def project_history(
    history: Sequence[TaskObservation], indices: np.ndarray, task_names: Sequence[str]
) -> List[TaskObservation]:
    """Restricts observations to a parameter subset and a task subset."""
    projected = []
    for observation in history:
        values = observation.config.values
        projected.append(
            TaskObservation(
                Configuration(tuple(values[i] for i in indices)),
                {name: observation.values[name] for name in task_names},
            )
        )
    return projected


def fit_clustered(
    history: Sequence[TaskObservation],
    space: ParamSpace,
    tasks: TaskRegistry,
    clusters: ClusterSpec,
    seed: int = 0,
    **fit_options,
) -> List[ClusterModel]:
    """
    Fits one independent GP per cluster on the cluster's projected parameters.

    Each cluster model sees its own tasks plus the primary task; it is an ICM model when
    that makes more than one task, a plain GP otherwise. Cluster i is fitted with seed
    `seed + i`, so a single all-covering cluster reproduces `fit_multitask`.

    Args:
        history (Sequence[TaskObservation]): Complete observations.
        space (ParamSpace): Full space.
        tasks (TaskRegistry): Full task registry.
        clusters (ClusterSpec): Decomposition, validated against space and tasks.
        seed (int): Base seed of the hyperparameter search.

    Returns:
        List[ClusterModel]: One fitted model per cluster, in cluster order.

    Raises:
        InvalidArgumentError: If the clusters reference unknown parameters or tasks.
        NumericalFailureError: Propagated from a cluster fit.
    """
    clusters.validate(space, tasks)
    primary = tasks.primary.name

    def fit_one(item: Tuple[int, Cluster]) -> ClusterModel:
        i, cluster = item
        registry = tasks.subset(set(cluster.tasks) | {primary})
        sub, indices = subspace(space, cluster.params)
        dataset = build_dataset(project_history(history, indices, registry.names), sub, registry)
        model = fit_multitask(dataset, seed=seed + i, **fit_options)
        logger.debug(
            f"Cluster {i}: {len(cluster.params)} params, tasks {registry.names}, "
            f"{dataset.targets.shape[0]} rows"
        )
        return ClusterModel(cluster, sub, indices, dataset, model)

    with ThreadPoolExecutor(max_workers=FIT_WORKERS) as executor:
        return list(executor.map(fit_one, enumerate(clusters)))


def fit_surrogate_for(
    history: Sequence[TaskObservation],
    space: ParamSpace,
    tasks: TaskRegistry,
    seed: int = 0,
    primary_only: bool = False,
    **fit_options,
) -> Tuple[MultiTaskDataset, GPModel]:
    """
    Builds the dataset and fits a whole-space surrogate.

    Args:
        primary_only (bool): Model the primary task alone (single-task GP).

    Returns:
        tuple: (dataset, model)
    """
    registry = tasks.subset([tasks.primary.name]) if primary_only else tasks
    observations = history
    if primary_only:
        observations = [
            TaskObservation(o.config, {registry.primary.name: o.values[registry.primary.name]})
            for o in history
        ]
    dataset = build_dataset(observations, space, registry)
    return dataset, fit_multitask(dataset, seed=seed, **fit_options)


def describe_task_matrix(model: GPModel, registry: TaskRegistry) -> Dict[str, Dict[str, float]]:
    """Learned task similarity B as a nested {task: {task: value}} mapping."""
    B = model.task_matrix
    names = registry.names if B.shape[0] == len(registry) else [registry.primary.name]
    return {a: {b: float(B[i, j]) for j, b in enumerate(names)} for i, a in enumerate(names)}


def residuals(dataset: MultiTaskDataset, model: GPModel) -> Dict[str, np.ndarray]:
    """Observed minus posterior mean at each training point, per task (standardized units)."""
    result = {}
    points = dataset.points
    for t, name in enumerate(dataset.registry.names):
        means, _ = model.posterior_many(points, t if model.num_tasks > 1 else 0)
        result[name] = dataset.column(name) - means
    return result
