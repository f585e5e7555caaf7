"""
Healthcheck utility to verify a tuner setup before a long run.

This script checks that the tuner config file is valid and, when it has an objective
section, that the benchmark executable can be found. It's used before starting a
multi-hour benchmark run set, so a broken setup fails in seconds instead of at step 1.

Usage:
    python healthcheck.py [config.json]
"""

import shlex
import shutil
import sys

from config import DEFAULT_CONFIG_PATH
from config_file import load_tuner_file
from exceptions import TunerError


def check_config(path: str):
    """
    Check if the config file parses and its sections fit together.

    Returns:
        TunerFile or None: The loaded file, None when it is invalid.
    """
    try:
        tuner_file = load_tuner_file(path)
        space = tuner_file.param_space()
        tasks = tuner_file.task_registry()
        clusters = tuner_file.cluster_spec()
        tuner_file.synthetic_spec().validate(space, tasks)
        objective = tuner_file.objective_spec()
        if objective is not None:
            objective.validate(space, tasks.names)

        print(
            f"Config check passed. {space.dimension} params, {len(tasks)} tasks, "
            f"{0 if clusters is None else len(clusters)} clusters"
        )
        return tuner_file
    except TunerError as e:
        print(f"Config check failed: {e}")
        return None


def check_benchmark(tuner_file) -> bool:
    """
    Check if the executable of the benchmark command is on the PATH.
    """
    objective = tuner_file.objective_spec()
    if objective is None:
        print("No objective section, only the synthetic objective is available.")
        return True
    executable = shlex.split(objective.command_template)[0]
    location = shutil.which(executable)
    if location is None:
        print(f"Benchmark check failed: {executable} not found")
        return False
    print(f"Benchmark check passed. {executable} -> {location}")
    return True


if __name__ == "__main__":
    print("Running tuner health checks...")

    path = sys.argv[1] if len(sys.argv) > 1 else DEFAULT_CONFIG_PATH
    tuner_file = check_config(path)
    benchmark_ok = tuner_file is not None and check_benchmark(tuner_file)

    if benchmark_ok:
        print("All health checks passed.")
        sys.exit(0)
    else:
        print("Health checks failed.")
        sys.exit(1)
