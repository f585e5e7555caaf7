"""
Objective adapters.

Objectives live in the `targets` package, one module per objective kind, each exposing
`make_objective(tuner_file, space, tasks, seed, profile)`. The module is looked up by kind
and imported by name, the way new objective kinds are plugged in.
"""

import importlib
import logging
from typing import Callable, Optional

from config import SUPPORTED_OBJECTIVES
from exceptions import InvalidArgumentError
from multitask import TaskRegistry
from param_space import ParamSpace
from targets.db_bench import (  # noqa: F401
    MetricExtraction,
    ObjectiveSpec,
    extract_metrics,
    render_command,
    run_benchmark,
)
from targets.synthetic import (  # noqa: F401
    SyntheticSurrogateSpec,
    default_synthetic_spec,
    synthetic_objective,
)
from tuner_loop import Objective

logger = logging.getLogger(__name__)

OBJECTIVE_MODULES = {
    "synthetic": "synthetic",
    "benchmark": "db_bench",
}


def import_objective(kind: str) -> Callable[..., Objective]:
    """
    Imports the `make_objective` factory of an objective kind.

    Args:
        kind (str): "synthetic" or "benchmark".

    Returns:
        Callable: The module's make_objective.

    Raises:
        InvalidArgumentError: If the kind is unknown.
        ImportError: If the module cannot be imported.
    """
    if kind not in SUPPORTED_OBJECTIVES or kind not in OBJECTIVE_MODULES:
        raise InvalidArgumentError(f"Unsupported objective: {kind} ({SUPPORTED_OBJECTIVES})")

    module_name = OBJECTIVE_MODULES[kind]
    import_paths = [f"targets.{module_name}", f"tuner.targets.{module_name}"]
    for path in import_paths:
        try:
            module = importlib.import_module(path)
            return getattr(module, "make_objective")
        except (ImportError, AttributeError):
            continue
    raise ImportError(f"Could not import the {kind} objective")


def build_objective(
    kind: str,
    tuner_file,
    space: ParamSpace,
    tasks: TaskRegistry,
    seed: int = 0,
    profile: Optional[str] = None,
) -> Objective:
    """
    Builds a ready-to-call objective for one run.

    Raises:
        InvalidArgumentError: If the kind is unknown.
        ConfigError: If the config file section of the objective is invalid.
    """
    make_objective = import_objective(kind)
    logger.debug(f"Using {kind} objective from {make_objective.__module__}")
    return make_objective(tuner_file, space, tasks, seed=seed, profile=profile)
