import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Modules import each other by file name, like the entry points do.
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import DEFAULT_CONFIG_PATH  # noqa: E402
from config_file import load_tuner_file  # noqa: E402
from multitask import ROCKSDB_TASKS, TaskRegistry, TaskSpec  # noqa: E402
from param_space import ParamSpace, ParamSpec, rocksdb_space  # noqa: E402

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240607)


@pytest.fixture
def rocksdb():
    return rocksdb_space()


@pytest.fixture
def rocksdb_tasks():
    return ROCKSDB_TASKS


@pytest.fixture
def small_space():
    """Two parameters, 11 * 5 = 55 configurations."""
    return ParamSpace([ParamSpec("a", 0, 10, 3), ParamSpec("b", 0, 4, 0)])


@pytest.fixture
def two_tasks():
    return TaskRegistry(
        [TaskSpec("throughput", "maximize", is_primary=True), TaskSpec("latency", "minimize")]
    )


@pytest.fixture
def rocksdb_file():
    """The shipped RocksDB tuner config."""
    return load_tuner_file(DEFAULT_CONFIG_PATH)
