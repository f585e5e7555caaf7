"""
Command-line entry point of the tuner.

Subcommands:
- tune: run one strategy for --repeats seeds (seed, seed+1, ...), one trial log per run,
  plus a single default-configuration measurement per run set (default.json)
- report: aggregate trial logs into convergence.csv and summary.json
- replay: refit the surrogate of a trial log and print its diagnostics
- survey: evaluate uniform random configurations and write survey.csv / histogram.csv

Usage:
    python cli_report.py tune --config configs/rocksdb.json --strategy clustered-mt \
        --budget 15 --repeats 5 --seed 7 --objective synthetic --out results/
    python cli_report.py report results/ --out results/
"""

import argparse
import csv
import glob
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import (
    DEFAULT_BUDGET,
    DEFAULT_CONFIG_PATH,
    DEFAULT_INIT_RANDOM,
    DEFAULT_REPEATS,
    DEFAULT_SEED,
    DEFAULT_SURVEY_SAMPLES,
    LOG_LEVEL,
    RESULTS_DIR,
    SUPPORTED_OBJECTIVES,
    SUPPORTED_STRATEGIES,
    setup_logging,
)
from config_file import TunerFile, load_tuner_file
from exceptions import (
    ConfigError,
    InvalidArgumentError,
    NotFoundError,
    ObjectiveFailure,
    TrialLogError,
    TunerError,
)
from gp_core import GPModel
from multitask import (
    MultiTaskDataset,
    describe_task_matrix,
    fit_clustered,
    fit_surrogate_for,
    residuals,
)
from param_space import Configuration, ParamSpace, default_config, sample_configs
from target_adapters import build_objective
from targets.synthetic import PROFILES
from tuner_loop import (
    History,
    TunerConfig,
    best_so_far,
    convergence_trace,
    load_history,
    run,
)

logger = logging.getLogger(__name__)

DEFAULT_FILE = "default.json"
CONVERGENCE_FILE = "convergence.csv"
SUMMARY_FILE = "summary.json"
SURVEY_FILE = "survey.csv"
HISTOGRAM_FILE = "histogram.csv"

THRESHOLDS = (1.1, 1.2, 1.3)
HISTOGRAM_BINS = 20


def _write_json(path: str, document: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, sort_keys=True, indent=2)
        f.write("\n")


def _log_name(strategy: str, seed: int) -> str:
    return f"{strategy}-seed{seed}.jsonl"


# ----------------------------------------------------------------------------------------
# tune


def _resolve(args, tuner_file: TunerFile) -> Tuple[str, int, int, int]:
    section = tuner_file.tuner
    strategy = args.strategy or section.strategy or "clustered-mt"
    budget = args.budget or section.budget or DEFAULT_BUDGET
    init_random = args.init_random or section.init_random or DEFAULT_INIT_RANDOM
    seed = args.seed if args.seed is not None else section.seed
    return strategy, budget, init_random, DEFAULT_SEED if seed is None else seed


def _measure_default(path: str, objective, space: ParamSpace, tasks) -> Dict[str, Any]:
    config = default_config(space)
    document = {"config": config.as_dict(space), "status": "ok", "values": {}, "error": None}
    try:
        measured = objective(config)
        document["values"] = {name: float(measured[name]) for name in tasks.names}
    except (ObjectiveFailure, KeyError) as e:
        logger.warning(f"Default configuration could not be measured: {e}")
        document["status"] = "failed"
        document["error"] = str(e)
    _write_json(path, document)
    return document


def _tune_one(
    config_path: str,
    objective_kind: str,
    profile: Optional[str],
    strategy: str,
    budget: int,
    init_random: int,
    run_seed: int,
    out: str,
    resume: bool,
) -> str:
    """One repeat of a run set; top-level so process workers can pickle it."""
    tuner_file = load_tuner_file(config_path)
    space = tuner_file.param_space()
    tasks = tuner_file.task_registry()
    try:
        config = TunerConfig(
            strategy=strategy,
            budget=budget,
            space=space,
            tasks=tasks,
            init_random=init_random,
            seed=run_seed,
            clusters=tuner_file.cluster_spec() if strategy == "clustered-mt" else None,
            acquisition=tuner_file.acquisition_spec(),
            record_timing=objective_kind != "synthetic",
        )
    except InvalidArgumentError as e:
        raise ConfigError(str(e), field="tuner") from e
    objective = build_objective(
        objective_kind, tuner_file, space, tasks, seed=run_seed, profile=profile
    )
    log_path = os.path.join(out, _log_name(strategy, run_seed))
    logger.info(f"Run {strategy}, seed {run_seed} -> {log_path}")
    history = run(config, objective, log_path=log_path, resume=resume)
    try:
        best = best_so_far(history)
    except NotFoundError:
        return f"{log_path}: no successful trial"
    name = tasks.primary.name
    return f"{log_path}: best {name}={best.values[name]:g} at step {best.step}"


def cli_tune(args) -> int:
    """
    Runs one strategy for --repeats consecutive seeds.

    Repeats of the synthetic objective may run in parallel processes (--jobs); benchmark
    repeats always run one after the other since they share the machine.

    Returns:
        int: 0 on success.

    Raises:
        ConfigError: On an invalid config file or flag combination.
    """
    tuner_file = load_tuner_file(args.config)
    space = tuner_file.param_space()
    tasks = tuner_file.task_registry()
    strategy, budget, init_random, seed = _resolve(args, tuner_file)

    if strategy == "clustered-mt" and tuner_file.cluster_spec() is None:
        raise ConfigError("strategy clustered-mt requires a clusters section", field="clusters")

    out = args.out or RESULTS_DIR
    os.makedirs(out, exist_ok=True)

    default_path = os.path.join(out, DEFAULT_FILE)
    if args.resume and os.path.exists(default_path):
        logger.info(f"Keeping existing default measurement {default_path}")
    else:
        objective = build_objective(
            args.objective, tuner_file, space, tasks, seed=seed, profile=args.profile
        )
        _measure_default(default_path, objective, space, tasks)

    jobs = args.jobs if args.objective == "synthetic" else 1
    if args.jobs > 1 and jobs == 1:
        logger.warning("Benchmark repeats run sequentially, ignoring --jobs")
    repeats = [
        (
            args.config,
            args.objective,
            args.profile,
            strategy,
            budget,
            init_random,
            seed + r,
            out,
            args.resume,
        )
        for r in range(args.repeats)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            lines = list(executor.map(_tune_one, *zip(*repeats)))
    else:
        lines = [_tune_one(*repeat) for repeat in repeats]
    for line in lines:
        print(line)
    return 0


# ----------------------------------------------------------------------------------------
# report


@dataclass
class RunSetSummary:
    """
    Trial logs of one or more strategies, aggregated per step.

    Attributes:
        runs (Dict[str, List[Tuple[str, History]]]): (log name, history) per strategy.
        default_value (Optional[float]): Primary value of the default configuration.
        default_config (Optional[Dict[str, int]]): The default configuration.
    """

    runs: Dict[str, List[Tuple[str, History]]] = field(default_factory=dict)
    default_value: Optional[float] = None
    default_config: Optional[Dict[str, int]] = None

    def add(self, name: str, history: History) -> None:
        self.runs.setdefault(history.config.strategy, []).append((name, history))

    def convergence_rows(self) -> List[Tuple[str, int, float, float, float]]:
        """
        (strategy, step, median, min, max) of best-so-far over the runs of each strategy.

        A run shorter than the longest one carries its final best forward; a run is left
        out of the steps before its first successful trial.
        """
        rows = []
        for strategy in sorted(self.runs):
            traces = [dict(convergence_trace(h)) for _, h in self.runs[strategy]]
            last_step = max((len(h) for _, h in self.runs[strategy]), default=0)
            finals = [trace[max(trace)] if trace else None for trace in traces]
            for step in range(1, last_step + 1):
                values = []
                for trace, final in zip(traces, finals):
                    if step in trace:
                        values.append(trace[step])
                    elif trace and step > max(trace):
                        values.append(final)
                if values:
                    rows.append(
                        (
                            strategy,
                            step,
                            float(np.median(values)),
                            float(np.min(values)),
                            float(np.max(values)),
                        )
                    )
        return rows

    def _steps_to(self, trace: List[Tuple[int, float]], factor: float, sign: int):
        if self.default_value is None:
            return None
        for step, value in trace:
            if sign > 0 and value >= factor * self.default_value:
                return step
            if sign < 0 and value <= self.default_value / factor:
                return step
        return None

    def summary(self) -> Dict[str, Any]:
        """JSON-ready best-found summary per strategy and run."""
        document = {
            "default": None
            if self.default_value is None
            else {"value": self.default_value, "config": self.default_config},
            "strategies": {},
        }
        for strategy in sorted(self.runs):
            runs = []
            for name, history in self.runs[strategy]:
                primary = history.config.tasks.primary
                entry = {
                    "log": name,
                    "seed": history.config.seed,
                    "steps": len(history),
                    "failed_steps": len(history) - len(history.ok_records()),
                    "best_value": None,
                    "best_step": None,
                    "best_config": None,
                    "improvement_ratio": None,
                    "steps_to_1.3x": None,
                    "steps_to_thresholds": None,
                }
                try:
                    best = best_so_far(history)
                except NotFoundError:
                    runs.append(entry)
                    continue
                trace = convergence_trace(history)
                entry["best_value"] = best.values[primary.name]
                entry["best_step"] = best.step
                entry["best_config"] = best.config.as_dict(history.config.space)
                if self.default_value:
                    entry["improvement_ratio"] = entry["best_value"] / self.default_value
                    entry["steps_to_thresholds"] = {
                        f"{factor}x": self._steps_to(trace, factor, primary.sign)
                        for factor in THRESHOLDS
                    }
                    entry["steps_to_1.3x"] = entry["steps_to_thresholds"]["1.3x"]
                runs.append(entry)
            bests = [r["best_value"] for r in runs if r["best_value"] is not None]
            ratios = [r["improvement_ratio"] for r in runs if r["improvement_ratio"] is not None]
            document["strategies"][strategy] = {
                "runs": runs,
                "median_best_value": float(np.median(bests)) if bests else None,
                "median_improvement_ratio": float(np.median(ratios)) if ratios else None,
            }
        return document


def _expand_logs(paths: Sequence[str]) -> List[str]:
    logs = []
    for path in paths:
        if os.path.isdir(path):
            logs.extend(sorted(glob.glob(os.path.join(path, "*.jsonl"))))
        else:
            logs.append(path)
    if not logs:
        raise TrialLogError(f"No trial logs found in {list(paths)}")
    return logs


def read_default(path: Optional[str]) -> Optional[Dict[str, Any]]:
    """The default measurement document, None when the file is absent or the run failed."""
    if path is None or not os.path.exists(path):
        return None
    try:
        with open(path, encoding="utf-8") as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise TrialLogError(f"Cannot read default measurement {path}: {e}") from e
    if document.get("status") != "ok":
        logger.warning(f"Default measurement {path} failed: {document.get('error')}")
        return None
    return document


def summarize(log_paths: Sequence[str], default_path: Optional[str] = None) -> RunSetSummary:
    """
    Loads trial logs and the default measurement into a RunSetSummary.

    Raises:
        TrialLogError: If a log is unreadable or corrupt.
    """
    summary = RunSetSummary()
    primary = None
    for path in log_paths:
        history = load_history(path)
        primary = history.config.tasks.primary.name
        summary.add(os.path.basename(path), history)
    default = read_default(default_path)
    if default is not None and primary in default.get("values", {}):
        summary.default_value = float(default["values"][primary])
        summary.default_config = default.get("config")
    return summary


def write_report(summary: RunSetSummary, out: str) -> Tuple[str, str]:
    os.makedirs(out, exist_ok=True)
    convergence_path = os.path.join(out, CONVERGENCE_FILE)
    with open(convergence_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["strategy", "step", "median", "min", "max"])
        for strategy, step, median, low, high in summary.convergence_rows():
            writer.writerow([strategy, step, repr(median), repr(low), repr(high)])
    summary_path = os.path.join(out, SUMMARY_FILE)
    _write_json(summary_path, summary.summary())
    return convergence_path, summary_path


def cli_report(args) -> int:
    """Writes convergence.csv and summary.json for the given trial logs."""
    logs = _expand_logs(args.logs)
    default_path = args.default
    if default_path is None:
        candidate = os.path.join(os.path.dirname(os.path.abspath(logs[0])), DEFAULT_FILE)
        default_path = candidate if os.path.exists(candidate) else None
    summary = summarize(logs, default_path)
    if summary.default_value is None:
        logger.warning("No default measurement found, improvement ratios are left empty")
    out = args.out or os.path.dirname(os.path.abspath(logs[0]))
    for path in write_report(summary, out):
        print(f"Wrote {path}")
    return 0


# ----------------------------------------------------------------------------------------
# replay


def _print_model(
    label: str, model: GPModel, dataset: MultiTaskDataset, names: Sequence[str]
) -> None:
    print(f"== {label}")
    print(f"  observations: {dataset.num_observations}, rows: {model.n}")
    print(f"  log marginal likelihood: {model.log_marginal_likelihood():.6f}")
    print(f"  signal variance: {model.params.signal_variance:.6g}")
    print(
        f"  noise variance: {model.params.noise_variance:.6g} (jitter {model.jitter:g})"
    )
    for name, lengthscale in zip(names, model.params.lengthscales):
        print(f"  lengthscale {name}: {lengthscale:.6g}")

    matrix = describe_task_matrix(model, dataset.registry)
    print("  task similarity B:")
    for task, row in matrix.items():
        cells = " ".join(f"{row[other]:10.4f}" for other in matrix)
        print(f"    {task:>24} {cells}")

    noise_std = float(np.sqrt(model.diagonal_noise))
    print(f"  residuals (standardized units, fitted noise std {noise_std:.3g}):")
    for task, values in residuals(dataset, model).items():
        print(
            f"    {task:>24} max |r| = {np.max(np.abs(values)):.3g}, "
            f"rms = {np.sqrt(np.mean(values ** 2)):.3g}"
        )
    fallback = dataset.stats.fallback_tasks
    if fallback:
        print(
            f"  note: sigma fallback (sigma = 1) used for {', '.join(fallback)}; "
            "fewer than two distinct values observed"
        )


def cli_replay(args) -> int:
    """
    Refits the surrogate of a trial log and prints posterior diagnostics.

    Raises:
        TrialLogError: If the log is unreadable, belongs to another strategy, or comes from
            a random run.
        NotFoundError: If the log holds no successful trial.
    """
    history = load_history(args.log)
    config = history.config
    if args.strategy and args.strategy != config.strategy:
        raise TrialLogError(
            f"{args.log} was written by strategy {config.strategy}, not {args.strategy}"
        )
    if config.strategy == "random":
        raise TrialLogError(f"{args.log} comes from a random run, there is no surrogate")
    observations = history.observations()
    if not observations:
        raise NotFoundError(f"{args.log} holds no successful trial")

    print(f"Replaying {args.log}: {config.strategy}, seed {config.seed}, {len(history)} steps")
    dumps = []
    if config.strategy == "clustered-mt":
        models = fit_clustered(
            observations, config.space, config.tasks, config.clusters, seed=config.seed
        )
        for i, cm in enumerate(models):
            label = f"cluster {i}: {', '.join(cm.dataset.registry.names)}"
            _print_model(label, cm.model, cm.dataset, cm.space.names)
            dumps.append({"cluster": cm.cluster.to_json(), "model": cm.model.to_dict()})
    else:
        dataset, model = fit_surrogate_for(
            observations,
            config.space,
            config.tasks,
            seed=config.seed,
            primary_only=config.strategy == "gp",
        )
        _print_model(config.strategy, model, dataset, config.space.names)
        dumps.append({"cluster": None, "model": model.to_dict()})

    if args.dump:
        _write_json(args.dump, dumps)
        print(f"Wrote {args.dump}")
    return 0


# ----------------------------------------------------------------------------------------
# survey


def cli_survey(args) -> int:
    """
    Measures uniform random configurations to look at the shape of the objective.

    Writes survey.csv (one row per configuration) and histogram.csv (primary task).
    """
    tuner_file = load_tuner_file(args.config)
    space = tuner_file.param_space()
    tasks = tuner_file.task_registry()
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    objective = build_objective(
        args.objective, tuner_file, space, tasks, seed=seed, profile=args.profile
    )
    rng = np.random.default_rng(seed)
    configs = sample_configs(space, rng, args.samples)

    out = args.out or RESULTS_DIR
    os.makedirs(out, exist_ok=True)
    primary_values = []
    survey_path = os.path.join(out, SURVEY_FILE)
    with open(survey_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(space.names + tasks.names + ["status"])
        for i, row in enumerate(configs, start=1):
            config = Configuration(tuple(row.tolist()))
            try:
                measured = objective(config)
                values = [float(measured[name]) for name in tasks.names]
                status = "ok"
                primary_values.append(measured[tasks.primary.name])
            except (ObjectiveFailure, KeyError) as e:
                logger.warning(f"Survey sample {i} failed: {e}")
                values = [""] * len(tasks)
                status = "failed"
            writer.writerow(list(config.values) + values + [status])
            if i % 50 == 0:
                logger.info(f"Survey: {i}/{args.samples} configurations measured")

    histogram_path = os.path.join(out, HISTOGRAM_FILE)
    with open(histogram_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bin_lower", "bin_upper", "count"])
        if primary_values:
            counts, edges = np.histogram(primary_values, bins=args.bins)
            for count, low, high in zip(counts, edges[:-1], edges[1:]):
                writer.writerow([repr(float(low)), repr(float(high)), int(count)])
    print(f"Wrote {survey_path}")
    print(f"Wrote {histogram_path}")
    return 0


# ----------------------------------------------------------------------------------------
# main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Multi-task Bayesian-optimization tuner for discrete system configurations"
    )
    parser.add_argument(
        "--log-level", default=LOG_LEVEL, help="Logging level (default: %(default)s)"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    tune = subparsers.add_parser("tune", help="Run a strategy for several seeds")
    tune.add_argument("--config", default=DEFAULT_CONFIG_PATH, help="Tuner config file (JSON)")
    tune.add_argument("--strategy", choices=SUPPORTED_STRATEGIES)
    tune.add_argument("--budget", type=int, help="Evaluations per run, initial trials included")
    tune.add_argument("--init-random", type=int, help="Initial random trials per run")
    tune.add_argument("--repeats", type=int, default=DEFAULT_REPEATS)
    tune.add_argument("--seed", type=int, help="Seed of the first run")
    tune.add_argument("--objective", choices=SUPPORTED_OBJECTIVES, default="synthetic")
    tune.add_argument("--profile", choices=sorted(PROFILES), help="Synthetic noise profile")
    tune.add_argument("--out", help="Output directory for trial logs")
    tune.add_argument("--resume", action="store_true", help="Continue existing trial logs")
    tune.add_argument(
        "--jobs", type=int, default=1, help="Parallel repeats (synthetic objective only)"
    )
    tune.set_defaults(handler=cli_tune)

    report = subparsers.add_parser("report", help="Aggregate trial logs")
    report.add_argument("logs", nargs="+", help="Trial logs or directories of trial logs")
    report.add_argument("--default", help="Default measurement (default.json next to the logs)")
    report.add_argument("--out", help="Output directory (directory of the first log)")
    report.set_defaults(handler=cli_report)

    replay = subparsers.add_parser("replay", help="Refit and inspect the surrogate of a log")
    replay.add_argument("log", help="Trial log")
    replay.add_argument("--strategy", choices=SUPPORTED_STRATEGIES, help="Expected strategy")
    replay.add_argument("--dump", help="Write the fitted models as JSON to this path")
    replay.set_defaults(handler=cli_replay)

    survey = subparsers.add_parser("survey", help="Measure uniform random configurations")
    survey.add_argument("--config", default=DEFAULT_CONFIG_PATH, help="Tuner config file (JSON)")
    survey.add_argument("--samples", type=int, default=DEFAULT_SURVEY_SAMPLES)
    survey.add_argument("--bins", type=int, default=HISTOGRAM_BINS)
    survey.add_argument("--seed", type=int)
    survey.add_argument("--objective", choices=SUPPORTED_OBJECTIVES, default="synthetic")
    survey.add_argument("--profile", choices=sorted(PROFILES), help="Synthetic noise profile")
    survey.add_argument("--out", help="Output directory")
    survey.set_defaults(handler=cli_survey)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    if getattr(args, "repeats", 1) < 1:
        logger.error("--repeats must be at least 1")
        return 2
    try:
        return args.handler(args)
    except TunerError as e:
        logger.error(str(e))
        return 1
    except KeyboardInterrupt:
        logger.error("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
