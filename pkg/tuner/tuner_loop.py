"""
The outer Bayesian-optimization loop.

Each step either draws a seeded uniform configuration (the initial random trials, the
random strategy, or a fallback after a surrogate failure) or refits the surrogate of the
selected strategy on every ok trial so far and proposes the EI maximizer. The evaluated
trial is appended to the history and flushed to the JSON-lines trial log before the next
step starts, so a run can be resumed from its log.

Strategies:
- random: uniform sampling only
- gp: single-task GP on the primary task
- multitask: one ICM GP over all tasks
- clustered-mt: one GP per parameter cluster, primary task in each
"""

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from acquisition import AcquisitionSpec, propose, propose_clustered
from config import DEFAULT_INIT_RANDOM, DEFAULT_SEED, SUPPORTED_STRATEGIES
from exceptions import (
    InvalidArgumentError,
    NotFoundError,
    NumericalFailureError,
    ObjectiveFailure,
    TrialLogError,
)
from multitask import (
    ClusterSpec,
    TaskObservation,
    TaskRegistry,
    cluster_spec_from_json,
    fit_clustered,
    fit_surrogate_for,
    registry_from_json,
)
from param_space import Configuration, ParamSpace, random_config, space_from_json

logger = logging.getLogger(__name__)

Objective = Callable[[Configuration], Mapping[str, float]]

LOG_FORMAT_VERSION = 1

STATUS_OK = "ok"
STATUS_FAILED = "failed"

SOURCE_RANDOM = "random"
SOURCE_MODEL = "model"
SOURCE_FALLBACK = "fallback"


@dataclass(frozen=True)
class TunerConfig:
    """
    Settings of one tuning run.

    Attributes:
        strategy (str): random | gp | multitask | clustered-mt.
        budget (int): Total evaluations, the initial random trials included.
        space (ParamSpace): Search space.
        tasks (TaskRegistry): Tasks measured by the objective.
        init_random (int): Number of initial uniform trials.
        seed (int): Non-negative base seed; every random choice derives from it.
        clusters (Optional[ClusterSpec]): Decomposition, required iff strategy is clustered-mt.
        acquisition (AcquisitionSpec): Candidate search settings.
        record_timing (bool): Record wall-clock times; off for byte-reproducible logs.
    """

    strategy: str
    budget: int
    space: ParamSpace
    tasks: TaskRegistry
    init_random: int = DEFAULT_INIT_RANDOM
    seed: int = DEFAULT_SEED
    clusters: Optional[ClusterSpec] = None
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    record_timing: bool = True

    def __post_init__(self):
        if self.strategy not in SUPPORTED_STRATEGIES:
            raise InvalidArgumentError(
                f"Unknown strategy {self.strategy!r} (supported: {SUPPORTED_STRATEGIES})"
            )
        if self.budget < 1 or self.init_random < 1:
            raise InvalidArgumentError("budget and init_random must be positive")
        if self.budget < self.init_random:
            raise InvalidArgumentError(
                f"budget ({self.budget}) must be at least init_random ({self.init_random})"
            )
        if self.seed < 0:
            raise InvalidArgumentError("seed must be non-negative")
        if self.strategy == "clustered-mt":
            if self.clusters is None:
                raise InvalidArgumentError("Strategy clustered-mt requires clusters")
            self.clusters.validate(self.space, self.tasks)
        elif self.clusters is not None:
            raise InvalidArgumentError(
                f"Clusters are only used by clustered-mt, not by {self.strategy}"
            )

    def snapshot(self) -> Dict[str, Any]:
        """JSON-ready copy written as the trial log header."""
        return {
            "strategy": self.strategy,
            "budget": self.budget,
            "init_random": self.init_random,
            "seed": self.seed,
            "space": self.space.to_json(),
            "tasks": self.tasks.to_json(),
            "clusters": None if self.clusters is None else self.clusters.to_json(),
            "acquisition": asdict(self.acquisition),
            "record_timing": self.record_timing,
        }

    @classmethod
    def from_snapshot(cls, document: Mapping[str, Any]) -> "TunerConfig":
        clusters = document.get("clusters")
        return cls(
            strategy=document["strategy"],
            budget=document["budget"],
            space=space_from_json(document["space"]),
            tasks=registry_from_json(document["tasks"]),
            init_random=document["init_random"],
            seed=document["seed"],
            clusters=None if clusters is None else cluster_spec_from_json(clusters),
            acquisition=AcquisitionSpec(**document["acquisition"]),
            record_timing=document.get("record_timing", True),
        )


@dataclass(frozen=True)
class TrialRecord:
    """
    One evaluated configuration.

    Attributes:
        step (int): 1-based step index.
        config (Configuration): Evaluated configuration.
        values (Dict[str, float]): Raw measurement per task (empty or partial when failed).
        status (str): "ok" or "failed".
        wall_time (float): Seconds spent in the objective (0.0 when timing is off).
        source (str): "random", "model" or "fallback".
        acquisition_value (Optional[float]): EI of the proposal, None for random draws.
        fit_seconds (float): Seconds spent fitting and proposing (0.0 when timing is off).
        error (Optional[str]): Failure message of a failed trial.
    """

    step: int
    config: Configuration
    values: Dict[str, float]
    status: str
    wall_time: float = 0.0
    source: str = SOURCE_RANDOM
    acquisition_value: Optional[float] = None
    fit_seconds: float = 0.0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    def to_json(self) -> Dict[str, Any]:
        return {
            "type": "trial",
            "step": self.step,
            "config": list(self.config.values),
            "values": dict(self.values),
            "status": self.status,
            "wall_time": self.wall_time,
            "source": self.source,
            "acquisition_value": self.acquisition_value,
            "fit_seconds": self.fit_seconds,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, document: Mapping[str, Any]) -> "TrialRecord":
        return cls(
            step=int(document["step"]),
            config=Configuration(tuple(document["config"])),
            values={k: float(v) for k, v in document["values"].items()},
            status=document["status"],
            wall_time=float(document.get("wall_time", 0.0)),
            source=document.get("source", SOURCE_RANDOM),
            acquisition_value=document.get("acquisition_value"),
            fit_seconds=float(document.get("fit_seconds", 0.0)),
            error=document.get("error"),
        )


@dataclass
class History:
    """
    Append-only list of trials of one run, with the config it ran under.

    Attributes:
        config (TunerConfig): Snapshot of the run settings.
        records (List[TrialRecord]): Trials in step order.
    """

    config: TunerConfig
    records: List[TrialRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: TrialRecord) -> None:
        expected = len(self.records) + 1
        if record.step != expected:
            raise InvalidArgumentError(f"Expected step {expected}, got {record.step}")
        self.records.append(record)

    def ok_records(self) -> List[TrialRecord]:
        return [r for r in self.records if r.ok]

    def observations(self) -> List[TaskObservation]:
        return [TaskObservation(r.config, r.values) for r in self.ok_records()]

    def primary_values(self) -> List[Optional[float]]:
        """Primary raw value per step, None for failed steps."""
        name = self.config.tasks.primary.name
        return [r.values[name] if r.ok else None for r in self.records]


def _dump(document: Mapping[str, Any]) -> str:
    return json.dumps(document, sort_keys=True, separators=(",", ":"))


class TrialLog:
    """
    JSON-lines trial log: one header line with the config snapshot, then one line per trial.

    Every line is flushed and fsync'ed before the loop moves on. An unterminated last line,
    left by a crash in the middle of a write, is discarded when the log is read.
    """

    def __init__(self, path: str):
        self.path = path

    @staticmethod
    def read(path: str) -> Tuple[Dict[str, Any], List[TrialRecord], int]:
        """
        Parses a trial log.

        Returns:
            tuple: (config snapshot, records, byte length of the valid prefix)

        Raises:
            TrialLogError: If the file is missing, has no header, holds a corrupt complete
                line, or its steps are not contiguous from 1.
        """
        try:
            with open(path, "rb") as f:
                content = f.read()
        except OSError as e:
            raise TrialLogError(f"Cannot read trial log {path}: {e}") from e

        lines = content.split(b"\n")
        tail = lines.pop()
        valid_length = len(content) - len(tail)
        if tail:
            logger.warning(f"Discarding truncated last line of {path} ({len(tail)} bytes)")
        if not lines:
            raise TrialLogError(f"Trial log {path} has no header line")

        documents = []
        for number, line in enumerate(lines, start=1):
            try:
                documents.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise TrialLogError(f"{path}:{number}: corrupt line ({e.msg})") from e

        header = documents[0]
        if header.get("type") != "header" or "config" not in header:
            raise TrialLogError(f"{path}:1: missing header line")
        if header.get("format") != LOG_FORMAT_VERSION:
            raise TrialLogError(f"{path}: unsupported log format {header.get('format')}")
        records = []
        for number, document in enumerate(documents[1:], start=2):
            try:
                record = TrialRecord.from_json(document)
            except (KeyError, TypeError, ValueError) as e:
                raise TrialLogError(f"{path}:{number}: malformed trial ({e})") from e
            if record.step != len(records) + 1:
                raise TrialLogError(
                    f"{path}:{number}: step {record.step} breaks the sequence"
                )
            records.append(record)
        return header["config"], records, valid_length

    def start(self, config: TunerConfig, resume: bool = False) -> List[TrialRecord]:
        """
        Prepares the log for appending.

        Args:
            config (TunerConfig): Settings of the run.
            resume (bool): Continue an existing log instead of starting a new one.

        Returns:
            List[TrialRecord]: Trials already in the log (empty for a new run).

        Raises:
            TrialLogError: If the existing log was written under different settings; only
                the budget may differ.
        """
        if resume and os.path.exists(self.path):
            snapshot, records, valid_length = self.read(self.path)
            ours = config.snapshot()
            theirs = dict(snapshot)
            theirs["budget"] = ours["budget"]
            if theirs != ours:
                raise TrialLogError(
                    f"Trial log {self.path} was written under different settings"
                )
            if valid_length != os.path.getsize(self.path):
                with open(self.path, "r+b") as f:
                    f.truncate(valid_length)
            logger.info(f"Resuming {self.path} after step {len(records)}")
            return records

        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as f:
            f.write(
                _dump(
                    {
                        "type": "header",
                        "format": LOG_FORMAT_VERSION,
                        "config": config.snapshot(),
                    }
                )
                + "\n"
            )
            f.flush()
            os.fsync(f.fileno())
        return []

    def append(self, record: TrialRecord) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(_dump(record.to_json()) + "\n")
            f.flush()
            os.fsync(f.fileno())


def load_history(path: str) -> History:
    """
    Rebuilds the history of a run from its trial log.

    Raises:
        TrialLogError: If the log is unreadable, corrupt, or its header is invalid.
    """
    snapshot, records, _ = TrialLog.read(path)
    try:
        config = TunerConfig.from_snapshot(snapshot)
    except (InvalidArgumentError, KeyError, TypeError) as e:
        raise TrialLogError(f"{path}: invalid config header ({e})") from e
    history = History(config)
    for record in records:
        history.append(record)
    return history


def step_seed(seed: int, step: int) -> int:
    """Seed of one step, derived from the run seed and the step index only."""
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def _check_measurement(values: Mapping[str, float], tasks: TaskRegistry) -> Dict[str, float]:
    measured = {}
    for name in tasks.names:
        if name not in values:
            raise ObjectiveFailure(f"Objective returned no value for task {name}", task=name)
        value = float(values[name])
        if not math.isfinite(value):
            raise ObjectiveFailure(f"Objective returned {value} for task {name}", task=name)
        measured[name] = value
    return measured


def _propose_from_model(
    config: TunerConfig, history: History, seed: int
) -> Tuple[Configuration, float]:
    observations = history.observations()
    evaluated = [r.config for r in history.records]
    if config.strategy == "clustered-mt":
        models = fit_clustered(
            observations, config.space, config.tasks, config.clusters, seed=seed
        )
        incumbent = models[0].dataset.incumbent()
        proposal = propose_clustered(
            models, config.space, incumbent, config.acquisition, seed, evaluated=evaluated
        )
    else:
        dataset, model = fit_surrogate_for(
            observations,
            config.space,
            config.tasks,
            seed=seed,
            primary_only=config.strategy == "gp",
        )
        proposal = propose(
            model,
            config.space,
            dataset.incumbent(),
            config.acquisition,
            seed,
            task=dataset.registry.primary_index,
            evaluated=evaluated,
        )
    return proposal.config, proposal.acquisition_value


def _run_step(
    config: TunerConfig, history: History, objective: Objective, step: int
) -> TrialRecord:
    seed = step_seed(config.seed, step)
    rng = np.random.default_rng(seed)
    source = SOURCE_RANDOM
    acquisition_value = None
    started = time.perf_counter()
    model_step = (
        config.strategy != "random"
        and step > config.init_random
        and len(history.ok_records()) > 0
    )
    if model_step:
        try:
            candidate, acquisition_value = _propose_from_model(config, history, seed)
            source = SOURCE_MODEL
        except NumericalFailureError as e:
            logger.warning(f"Step {step}: surrogate failed ({e}), proposing at random")
            candidate = random_config(config.space, rng)
            source = SOURCE_FALLBACK
    else:
        candidate = random_config(config.space, rng)
    fit_seconds = time.perf_counter() - started

    started = time.perf_counter()
    try:
        values = _check_measurement(objective(candidate), config.tasks)
        status, error = STATUS_OK, None
    except ObjectiveFailure as e:
        logger.warning(f"Step {step}: objective failed: {e}")
        if e.output_tail:
            logger.debug(f"Output tail:\n{e.output_tail}")
        values, status, error = {}, STATUS_FAILED, str(e)
    wall_time = time.perf_counter() - started

    if not config.record_timing:
        wall_time = fit_seconds = 0.0
    record = TrialRecord(
        step=step,
        config=candidate,
        values=values,
        status=status,
        wall_time=wall_time,
        source=source,
        acquisition_value=acquisition_value,
        fit_seconds=fit_seconds,
        error=error,
    )
    primary = values.get(config.tasks.primary.name)
    logger.info(
        f"Step {step}/{config.budget} [{config.strategy}, {source}] "
        f"{status} {config.tasks.primary.name}={primary}"
    )
    return record


def run(
    config: TunerConfig,
    objective: Objective,
    log_path: Optional[str] = None,
    resume: bool = False,
) -> History:
    """
    Runs the optimization loop up to the budget.

    Args:
        config (TunerConfig): Run settings.
        objective (Objective): Maps a configuration to raw task values; raises
            ObjectiveFailure when it cannot measure.
        log_path (Optional[str]): Trial log to write; None keeps the run in memory.
        resume (bool): Continue from the trials already in `log_path`.

    Returns:
        History: Every trial of the run, failed ones included.

    Raises:
        TrialLogError: If resuming from a log written under different settings.

    Example:
        history = run(TunerConfig("gp", 20, rocksdb_space(), ROCKSDB_TASKS), objective)
        best_so_far(history)
    """
    history = History(config)
    log = TrialLog(log_path) if log_path else None
    if log is not None:
        for record in log.start(config, resume=resume):
            history.append(record)

    for step in range(len(history) + 1, config.budget + 1):
        record = _run_step(config, history, objective, step)
        history.append(record)
        if log is not None:
            log.append(record)
    return history


def best_so_far(history: History) -> TrialRecord:
    """
    The ok trial with the best primary value; the earliest step wins ties.

    Raises:
        NotFoundError: If no trial succeeded.
    """
    primary = history.config.tasks.primary
    best = None
    best_score = -math.inf
    for record in history.ok_records():
        score = primary.sign * record.values[primary.name]
        if best is None or score > best_score:
            best, best_score = record, score
    if best is None:
        raise NotFoundError("No successful trial in the history")
    return best


def convergence_trace(history: History) -> List[Tuple[int, float]]:
    """
    Best primary value after every step, starting at the first ok trial.

    Failed steps carry the previous best; an all-failed history gives an empty trace.
    """
    sign = history.config.tasks.primary.sign
    trace = []
    best = None
    for record, value in zip(history.records, history.primary_values()):
        if value is not None and (best is None or sign * value > sign * best):
            best = value
        if best is not None:
            trace.append((record.step, best))
    return trace
