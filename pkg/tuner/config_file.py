"""
The tuner config file: one JSON document with the sections
space, tasks, clusters, acquisition, objective, synthetic and tuner.

The document is validated with pydantic models, then converted into the tuner's own types.
Every problem is raised as a ConfigError: JSON syntax errors with line and column, schema and
semantic errors with the dotted path of the offending field.
"""

import json
import logging
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from acquisition import AcquisitionSpec
from exceptions import ConfigError, InvalidArgumentError
from multitask import (
    ROCKSDB_TASKS,
    ClusterSpec,
    TaskRegistry,
    cluster_spec_from_json,
    default_rocksdb_clusters,
    registry_from_json,
)
from param_space import ROCKSDB_SPACE_NAME, ParamSpace, load_space
from targets.db_bench import MetricExtraction, ObjectiveSpec
from targets.synthetic import DEFAULT_OPTIMA, SyntheticSurrogateSpec

logger = logging.getLogger(__name__)

Strategy = Literal["random", "gp", "multitask", "clustered-mt"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ParamEntry(_Section):
    name: str
    lower: int
    upper: int
    default: int


class TaskEntry(_Section):
    name: str
    direction: Literal["maximize", "minimize"]
    primary: bool = False


class ClusterEntry(_Section):
    tasks: List[str] = Field(default_factory=list)
    params: List[str] = Field(min_length=1)


class AcquisitionSection(_Section):
    kind: Literal["expected-improvement"] = "expected-improvement"
    jitter: float = Field(0.0, ge=0)
    n_candidates: int = Field(2048, ge=1)
    n_neighbor_refinements: int = Field(64, ge=0)
    cluster_head: Literal["guide", "primary"] = "guide"


class ExtractionEntry(_Section):
    task: str
    pattern: str
    source: Literal["stdout", "stats-file"] = "stdout"
    reducer: Literal["last", "max", "mean"] = "last"


class ObjectiveSection(_Section):
    command_template: str
    working_dir: Optional[str] = None
    timeout_s: float = Field(1200.0, gt=0)
    stats_path: Optional[str] = None
    extraction: List[ExtractionEntry] = Field(min_length=1)


class SyntheticSection(_Section):
    optima: Optional[Dict[str, float]] = None
    noise_std: float = Field(0.0, ge=0)
    seed: Optional[int] = Field(None, ge=0)
    clusters: Optional[List[ClusterEntry]] = None


class TunerSection(_Section):
    strategy: Optional[Strategy] = None
    budget: Optional[int] = Field(None, ge=1)
    init_random: Optional[int] = Field(None, ge=1)
    seed: Optional[int] = Field(None, ge=0)


class TunerFile(_Section):
    """
    Validated tuner config file.

    Every section is optional; missing sections fall back to the RocksDB defaults
    (built-in space, four RocksDB tasks, default acquisition settings).
    """

    space: Union[str, List[ParamEntry]] = ROCKSDB_SPACE_NAME
    tasks: Optional[List[TaskEntry]] = None
    clusters: Optional[List[ClusterEntry]] = None
    acquisition: AcquisitionSection = Field(default_factory=AcquisitionSection)
    objective: Optional[ObjectiveSection] = None
    synthetic: Optional[SyntheticSection] = None
    tuner: TunerSection = Field(default_factory=TunerSection)

    def param_space(self) -> ParamSpace:
        document = self.space if isinstance(self.space, str) else [
            p.model_dump() for p in self.space
        ]
        try:
            return load_space(document)
        except InvalidArgumentError as e:
            raise ConfigError(str(e), field="space") from e

    def task_registry(self) -> TaskRegistry:
        if self.tasks is None:
            return ROCKSDB_TASKS
        try:
            return registry_from_json([t.model_dump() for t in self.tasks])
        except InvalidArgumentError as e:
            raise ConfigError(str(e), field="tasks") from e

    def cluster_spec(self) -> Optional[ClusterSpec]:
        """The `clusters` section checked against space and tasks, None when absent."""
        if self.clusters is None:
            return None
        return _clusters(self.clusters, self.param_space(), self.task_registry(), "clusters")

    def acquisition_spec(self) -> AcquisitionSpec:
        return AcquisitionSpec(**self.acquisition.model_dump())

    def objective_spec(self) -> Optional[ObjectiveSpec]:
        if self.objective is None:
            return None
        section = self.objective
        try:
            rules = [MetricExtraction(**rule.model_dump()) for rule in section.extraction]
            return ObjectiveSpec(
                command_template=section.command_template,
                extraction=tuple(rules),
                working_dir=section.working_dir,
                timeout_s=section.timeout_s,
                stats_path=section.stats_path,
            )
        except InvalidArgumentError as e:
            raise ConfigError(str(e), field="objective") from e

    def synthetic_spec(self) -> SyntheticSurrogateSpec:
        """
        Surrogate shape; clusters come from `synthetic.clusters`, else `clusters`, else the
        default RocksDB decomposition.
        """
        section = self.synthetic or SyntheticSection()
        if section.clusters is not None:
            clusters = _clusters(
                section.clusters, self.param_space(), self.task_registry(), "synthetic.clusters"
            )
        else:
            clusters = self.cluster_spec() or default_rocksdb_clusters()
        try:
            return SyntheticSurrogateSpec(
                clusters, section.optima or DEFAULT_OPTIMA, section.noise_std
            )
        except InvalidArgumentError as e:
            raise ConfigError(str(e), field="synthetic") from e

    def synthetic_seed(self, default: int) -> int:
        """Noise seed of the surrogate: `synthetic.seed` when set, the run seed otherwise."""
        if self.synthetic is not None and self.synthetic.seed is not None:
            return self.synthetic.seed
        return default


def _clusters(
    entries: List[ClusterEntry], space: ParamSpace, tasks: TaskRegistry, field: str
) -> ClusterSpec:
    try:
        spec = cluster_spec_from_json([c.model_dump() for c in entries])
        spec.validate(space, tasks)
    except InvalidArgumentError as e:
        raise ConfigError(str(e), field=field) from e
    return spec


def _field_path(location) -> str:
    return ".".join(str(part) for part in location)


def parse_tuner_file(text: str) -> TunerFile:
    """
    Parses and validates a tuner config document.

    Raises:
        ConfigError: With line/column on a JSON syntax error, with the field path on a
            schema or semantic error.
    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(e.msg, line=e.lineno, column=e.colno) from e
    try:
        tuner_file = TunerFile.model_validate(document)
    except ValidationError as e:
        errors = e.errors()
        first = errors[0]
        message = first["msg"]
        if len(errors) > 1:
            message += f" (and {len(errors) - 1} more errors)"
        raise ConfigError(message, field=_field_path(first["loc"])) from e

    # Resolve the sections once so semantic errors surface at load time
    tuner_file.param_space()
    tuner_file.task_registry()
    tuner_file.cluster_spec()
    return tuner_file


def load_tuner_file(path: str) -> TunerFile:
    """
    Reads a tuner config file.

    Args:
        path (str): Path to the JSON document.

    Returns:
        TunerFile: The validated file.

    Raises:
        ConfigError: If the file is unreadable or invalid.
    """
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from e
    tuner_file = parse_tuner_file(text)
    logger.debug(f"Loaded tuner config {path}")
    return tuner_file

