"""
Deterministic decomposable stand-in for the RocksDB benchmark.

Every cluster c of parameters S_c has an optimum o_c on the unit cube and a loss
    loss_c(x) = mean over d in S_c of (x_d - o_c,d)^2
The cluster's adjacent task reports 100 * loss_c (minimized) and the primary task reports
    iops = 100000 * (1 - mean over clusters of loss_c) + N(0, noise_std)
so IOPS peaks at 100000 where every cluster sits at its optimum, and each adjacent task
depends on its own cluster's parameters only.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np

from exceptions import ConfigError, InvalidArgumentError
from multitask import ClusterSpec, TaskRegistry, default_rocksdb_clusters
from param_space import Configuration, ParamSpace, normalize

logger = logging.getLogger(__name__)

OPTIMUM_IOPS = 100000.0
ADJACENT_SCALE = 100.0

# Unit-cube optimum of every RocksDB parameter, grouped by the default clusters
DEFAULT_OPTIMA = {
    # level0 / flush
    "write_buffer_size": 0.9,
    "max_write_buffer_number": 0.85,
    "min_write_buffer_number_to_merge": 0.1,
    "max_background_flushes": 0.9,
    "level0_file_num_compaction_trigger": 0.15,
    # compaction / write amplification
    "max_background_compactions": 0.9,
    "max_bytes_for_level_multiplier": 0.1,
    "level0_slowdown_writes_trigger": 0.85,
    "level0_stop_writes_trigger": 0.9,
    # read
    "block_size": 0.1,
}

PROFILES = {
    "default": 0.0,
    "noisy": 500.0,
}


@dataclass(frozen=True)
class SyntheticSurrogateSpec:
    """
    Shape of the surrogate.

    Attributes:
        clusters (ClusterSpec): Parameter clusters and the task each one drives.
        optima (Mapping[str, float]): Unit-cube optimum per parameter.
        noise_std (float): Standard deviation of the Gaussian noise added to the primary task.
    """

    clusters: ClusterSpec
    optima: Mapping[str, float]
    noise_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "optima", dict(self.optima))
        for name, value in self.optima.items():
            if not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"Optimum of {name} ({value}) is outside [0, 1]")
        if self.noise_std < 0:
            raise InvalidArgumentError("noise_std must be non-negative")

    def validate(self, space: ParamSpace, tasks: TaskRegistry) -> None:
        """
        Raises:
            InvalidArgumentError: If the clusters do not fit the space and tasks, or a
                parameter has no optimum.
        """
        self.clusters.validate(space, tasks)
        missing = [name for name in space.names if name not in self.optima]
        if missing:
            raise InvalidArgumentError(f"No synthetic optimum for parameters {missing}")

    def with_profile(self, profile: Optional[str]) -> "SyntheticSurrogateSpec":
        if profile is None:
            return self
        if profile not in PROFILES:
            raise InvalidArgumentError(
                f"Unknown synthetic profile {profile!r} (known: {sorted(PROFILES)})"
            )
        return SyntheticSurrogateSpec(self.clusters, self.optima, PROFILES[profile])


def default_synthetic_spec(noise_std: float = 0.0) -> SyntheticSurrogateSpec:
    return SyntheticSurrogateSpec(default_rocksdb_clusters(), DEFAULT_OPTIMA, noise_std)


def cluster_losses(
    config: Configuration, spec: SyntheticSurrogateSpec, space: ParamSpace
) -> np.ndarray:
    """Squared distance to the optimum, averaged within each cluster."""
    point = normalize(space, config)
    losses = []
    for cluster in spec.clusters:
        indices = [space.index(name) for name in cluster.params]
        optimum = np.array([spec.optima[name] for name in cluster.params])
        losses.append(float(np.mean((point[indices] - optimum) ** 2)))
    return np.array(losses)


def synthetic_objective(
    config: Configuration,
    spec: SyntheticSurrogateSpec,
    seed: int,
    space: ParamSpace,
    primary: str = "iops",
) -> Dict[str, float]:
    """
    Evaluates the surrogate.

    The noise is drawn from a generator seeded with the run seed and the configuration, so
    the objective is a pure function even with noise_std > 0.

    Args:
        config (Configuration): Configuration to score.
        spec (SyntheticSurrogateSpec): Surrogate shape.
        seed (int): Non-negative noise seed.
        space (ParamSpace): Space of the configuration.
        primary (str): Name of the primary task.

    Returns:
        Dict[str, float]: Primary task plus each cluster's adjacent tasks.

    Example:
        synthetic_objective(default_config(space), default_synthetic_spec(), 0, space)
    """
    space.validate(config)
    losses = cluster_losses(config, spec, space)
    values = {}
    for cluster, loss in zip(spec.clusters, losses):
        for task in cluster.tasks:
            if task != primary:
                values[task] = ADJACENT_SCALE * loss
    iops = OPTIMUM_IOPS * (1.0 - float(np.mean(losses)))
    if spec.noise_std > 0:
        offsets = (config.as_array() - space.lowers).tolist()
        rng = np.random.default_rng([seed, *offsets])
        iops += float(rng.normal(0.0, spec.noise_std))
    values[primary] = iops
    return values


def make_objective(
    tuner_file, space: ParamSpace, tasks: TaskRegistry, seed: int = 0, profile=None
):
    """
    Builds the synthetic objective from the tuner config file.

    Raises:
        ConfigError: If the `synthetic` section does not fit the space and tasks.
    """
    try:
        spec = tuner_file.synthetic_spec().with_profile(profile)
        spec.validate(space, tasks)
    except InvalidArgumentError as e:
        raise ConfigError(str(e), field="synthetic") from e
    primary = tasks.primary.name
    noise_seed = tuner_file.synthetic_seed(seed)
    logger.info(f"Synthetic objective, noise_std={spec.noise_std:g}, noise seed {noise_seed}")

    def objective(config: Configuration) -> Dict[str, float]:
        return synthetic_objective(config, spec, noise_seed, space, primary)

    return objective
