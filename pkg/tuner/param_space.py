"""
Discrete ordinal search spaces.

A space is an ordered list of integer parameters with inclusive bounds and a default.
Configurations are mapped onto the unit cube with the declared bounds (not the observed
min/max), so the mapping does not move as the history grows.

The built-in RocksDB space reproduces the ten-parameter table of RocksDB v6.17 knobs.
Two cells of that table are read as follows:
- max_background_flushes is printed as "[1 10]"; it is read as the range [1, 10].
- level0_slowdown_writes_trigger lists default 0 outside its own range [1, 2^10];
  the default is stored as 1.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np

from exceptions import InvalidArgumentError

logger = logging.getLogger(__name__)

ROCKSDB_SPACE_NAME = "rocksdb-v6.17-table1"

# A point of the unit cube: 1-D float array of length D, every coordinate in [0, 1].
UnitPoint = np.ndarray


@dataclass(frozen=True)
class ParamSpec:
    """
    One discrete ordinal parameter.

    Attributes:
        name (str): Identifier, unique within a space.
        lower (int): Inclusive lower bound.
        upper (int): Inclusive upper bound.
        default (int): Value used by the default configuration.
    """

    name: str
    lower: int
    upper: int
    default: int

    def __post_init__(self):
        if not self.name or not isinstance(self.name, str):
            raise InvalidArgumentError("Parameter name must be a non-empty string")
        for field in ("lower", "upper", "default"):
            value = getattr(self, field)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise InvalidArgumentError(
                    f"{self.name}.{field} must be an integer, got {value!r}"
                )
            object.__setattr__(self, field, int(value))
        if self.lower >= self.upper:
            raise InvalidArgumentError(
                f"{self.name}: lower ({self.lower}) must be below upper ({self.upper})"
            )
        if not self.lower <= self.default <= self.upper:
            raise InvalidArgumentError(
                f"{self.name}: default {self.default} outside [{self.lower}, {self.upper}]"
            )

    @property
    def width(self) -> int:
        return self.upper - self.lower


@dataclass(frozen=True)
class Configuration:
    """
    Concrete integer assignment, aligned index-for-index with a ParamSpace.

    Attributes:
        values (Tuple[int, ...]): One integer per parameter.
    """

    values: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.int64)

    def as_dict(self, space: "ParamSpace") -> Dict[str, int]:
        return dict(zip(space.names, self.values))


class ParamSpace:
    """
    Ordered collection of ParamSpec, dimension D = number of parameters.

    Attributes:
        params (Tuple[ParamSpec, ...]): Parameter definitions in order.
        lowers (np.ndarray): Lower bounds as int64, length D.
        uppers (np.ndarray): Upper bounds as int64, length D.
    """

    def __init__(self, params: Sequence[ParamSpec]):
        params = tuple(params)
        if not params:
            raise InvalidArgumentError("A parameter space needs at least one parameter")
        names = [p.name for p in params]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise InvalidArgumentError(f"Duplicate parameter names: {duplicates}")
        self.params = params
        self._index = {name: i for i, name in enumerate(names)}
        self.lowers = np.array([p.lower for p in params], dtype=np.int64)
        self.uppers = np.array([p.upper for p in params], dtype=np.int64)
        self._widths = (self.uppers - self.lowers).astype(np.float64)

    def __repr__(self) -> str:
        return f"ParamSpace({[p.name for p in self.params]})"

    def __eq__(self, other) -> bool:
        return isinstance(other, ParamSpace) and self.params == other.params

    def __hash__(self) -> int:
        return hash(self.params)

    @property
    def dimension(self) -> int:
        return len(self.params)

    @property
    def names(self) -> List[str]:
        return [p.name for p in self.params]

    def index(self, name: str) -> int:
        """
        Position of a parameter in the space.

        Raises:
            InvalidArgumentError: If the name is unknown.
        """
        try:
            return self._index[name]
        except KeyError:
            raise InvalidArgumentError(f"Unknown parameter: {name}") from None

    def validate(self, config: Configuration) -> None:
        """
        Checks that a configuration belongs to this space.

        Raises:
            InvalidArgumentError: On a length mismatch or an out-of-range value.
        """
        if len(config) != self.dimension:
            raise InvalidArgumentError(
                f"Configuration has {len(config)} values, space has dimension {self.dimension}"
            )
        for spec, value in zip(self.params, config.values):
            if not spec.lower <= value <= spec.upper:
                raise InvalidArgumentError(
                    f"{spec.name}={value} outside [{spec.lower}, {spec.upper}]"
                )

    def cardinality(self) -> int:
        """Number of distinct configurations (exact Python integer)."""
        total = 1
        for spec in self.params:
            total *= spec.width + 1
        return total

    def to_json(self) -> List[Dict[str, Any]]:
        return [
            {"name": p.name, "lower": p.lower, "upper": p.upper, "default": p.default}
            for p in self.params
        ]


def _round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def normalize(space: ParamSpace, config: Configuration) -> UnitPoint:
    """
    Maps a configuration onto the unit cube with the declared bounds.

    Args:
        space (ParamSpace): Space the configuration belongs to.
        config (Configuration): Valid configuration.

    Returns:
        UnitPoint: (value - lower) / (upper - lower) per coordinate.

    Raises:
        InvalidArgumentError: On a dimension mismatch.

    Example:
        normalize(space, default_config(space))
    """
    if len(config) != space.dimension:
        raise InvalidArgumentError(
            f"Configuration has {len(config)} values, space has dimension {space.dimension}"
        )
    return normalize_many(space, config.as_array()[None, :])[0]


def normalize_many(space: ParamSpace, values: np.ndarray) -> np.ndarray:
    """Row-wise normalize of an (n, D) integer array."""
    values = np.asarray(values, dtype=np.int64)
    if values.ndim != 2 or values.shape[1] != space.dimension:
        raise InvalidArgumentError(
            f"Expected shape (n, {space.dimension}), got {values.shape}"
        )
    return (values - space.lowers).astype(np.float64) / space._widths


def denormalize(space: ParamSpace, point: UnitPoint) -> Configuration:
    """
    Maps a unit-cube point back to the nearest integer configuration.

    Each coordinate becomes round(lower + coord * (upper - lower)), rounding half away
    from zero, then clamped into [lower, upper].

    Raises:
        InvalidArgumentError: On a dimension mismatch.
    """
    point = np.asarray(point, dtype=np.float64)
    if point.ndim != 1 or point.shape[0] != space.dimension:
        raise InvalidArgumentError(
            f"Point has shape {point.shape}, space has dimension {space.dimension}"
        )
    raw = _round_half_away(space.lowers + point * space._widths)
    clamped = np.clip(raw, space.lowers, space.uppers).astype(np.int64)
    return Configuration(tuple(clamped.tolist()))


def default_config(space: ParamSpace) -> Configuration:
    return Configuration(tuple(p.default for p in space.params))


def sample_configs(space: ParamSpace, rng: np.random.Generator, n: int) -> np.ndarray:
    """
    Draws n configurations uniformly at random.

    Returns:
        np.ndarray: (n, D) int64 array, one configuration per row.
    """
    return rng.integers(space.lowers, space.uppers, size=(n, space.dimension), endpoint=True)


def random_config(space: ParamSpace, rng: np.random.Generator) -> Configuration:
    return Configuration(tuple(sample_configs(space, rng, 1)[0].tolist()))


def enumerate_configs(space: ParamSpace) -> np.ndarray:
    """
    Every configuration of a (small) space in lexicographic order.

    Returns:
        np.ndarray: (cardinality, D) int64 array.
    """
    ranges = [range(p.lower, p.upper + 1) for p in space.params]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64).reshape(
        -1, space.dimension
    )


def subspace(space: ParamSpace, names: Sequence[str]) -> Tuple[ParamSpace, np.ndarray]:
    """
    Projects a space onto a subset of its parameters, keeping the space's order.

    Args:
        space (ParamSpace): Full space.
        names (Sequence[str]): Parameters to keep.

    Returns:
        tuple: (projected ParamSpace, int array of the kept indices in the full space)

    Raises:
        InvalidArgumentError: If a name is unknown or the subset is empty.
    """
    wanted = set(names)
    unknown = sorted(wanted - set(space.names))
    if unknown:
        raise InvalidArgumentError(f"Unknown parameters: {unknown}")
    indices = np.array([i for i, p in enumerate(space.params) if p.name in wanted], dtype=int)
    return ParamSpace([space.params[i] for i in indices]), indices


def rocksdb_space() -> ParamSpace:
    """
    The ten RocksDB v6.17 parameters tuned for IOPS, with their ranges and defaults.

    Returns:
        ParamSpace: Ten discrete ordinal parameters.
    """
    return ParamSpace(
        [
            ParamSpec("max_background_compactions", 1, 2**8, 1),
            ParamSpec("max_background_flushes", 1, 10, 1),
            ParamSpec("write_buffer_size", 1, 15 * 10**7, 2**26),
            ParamSpec("max_write_buffer_number", 1, 2**7, 2),
            ParamSpec("min_write_buffer_number_to_merge", 1, 2**5, 1),
            ParamSpec("max_bytes_for_level_multiplier", 5, 15, 10),
            ParamSpec("block_size", 1, 5 * 10**5, 2**12),
            ParamSpec("level0_file_num_compaction_trigger", 1, 2**8, 2**2),
            # Listed default 0 lies outside the range; clamped to the lower bound.
            ParamSpec("level0_slowdown_writes_trigger", 1, 2**10, 1),
            ParamSpec("level0_stop_writes_trigger", 1, 2**10, 36),
        ]
    )


BUILTIN_SPACES = {
    ROCKSDB_SPACE_NAME: rocksdb_space,
}


def space_from_json(document: Sequence[Dict[str, Any]]) -> ParamSpace:
    """
    Builds a space from an array of {name, lower, upper, default} objects.

    Raises:
        InvalidArgumentError: If an entry is malformed.
    """
    specs = []
    for i, entry in enumerate(document):
        try:
            specs.append(
                ParamSpec(entry["name"], entry["lower"], entry["upper"], entry["default"])
            )
        except (KeyError, TypeError) as e:
            raise InvalidArgumentError(f"space[{i}] is missing field {e}") from None
    return ParamSpace(specs)


def load_space(source: Union[str, Sequence[Dict[str, Any]]]) -> ParamSpace:
    """
    Resolves a space from a built-in name or a JSON array.

    Args:
        source: Either a built-in space name such as "rocksdb-v6.17-table1" or a list
            of parameter objects.

    Raises:
        InvalidArgumentError: On an unknown name or malformed entries.
    """
    if isinstance(source, str):
        if source not in BUILTIN_SPACES:
            raise InvalidArgumentError(
                f"Unknown built-in space: {source} (known: {sorted(BUILTIN_SPACES)})"
            )
        return BUILTIN_SPACES[source]()
    return space_from_json(source)
