import os

import coloredlogs
from dotenv import load_dotenv

load_dotenv()

SUPPORTED_STRATEGIES = [
    "random",
    "gp",
    "multitask",
    "clustered-mt",
]

SUPPORTED_OBJECTIVES = [
    "synthetic",
    "benchmark",
]

DEFAULT_BUDGET = 100  # Total evaluations per run, the initial random trial included.
DEFAULT_INIT_RANDOM = 1
DEFAULT_REPEATS = 5
DEFAULT_SEED = 0
DEFAULT_SURVEY_SAMPLES = 500

# Base directory
BASE_DIR = os.path.dirname(os.path.abspath(__file__))

# Default tuner config file (space, tasks, clusters, acquisition, objective, synthetic)
DEFAULT_CONFIG_PATH = os.path.join(BASE_DIR, "configs", "rocksdb.json")

# Folder where trial logs and reports are written when --out is not given
RESULTS_DIR = os.getenv("TUNER_RESULTS_DIR", os.path.join(BASE_DIR, "results"))

LOG_LEVEL = os.getenv("TUNER_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

# Hyperparameter search settings
FIT_STARTS = int(os.getenv("TUNER_FIT_STARTS", 8))
FIT_EVALS_PER_START = int(os.getenv("TUNER_FIT_EVALS", 200))
FIT_WORKERS = int(os.getenv("TUNER_FIT_WORKERS", 4))

# Seconds a benchmark may outlive its timeout before it is killed
BENCH_KILL_GRACE = float(os.getenv("TUNER_BENCH_KILL_GRACE", 5))


def setup_logging(level: str = LOG_LEVEL) -> None:
    """
    Installs the coloured console handler used by every entry point.

    Args:
        level (str): Logging level name, e.g. "INFO" or "DEBUG".
    """
    coloredlogs.install(level=level.upper(), fmt=LOG_FORMAT)
