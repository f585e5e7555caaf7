"""
Exact Gaussian-process regression over unit-cube inputs.

Covers the ARD squared-exponential base kernel, the intrinsic coregionalization (ICM)
multi-task kernel k((x, m), (x', m')) = k_x(x, x') * B[m, m'], Cholesky-based inference
and hyperparameter fitting by maximizing the log marginal likelihood.

Hyperparameters are searched in log space (lengthscales, signal variance, noise variance,
task-kernel diagonal) and linear space (task-kernel factor) with a seeded multi-start,
coordinate-wise bounded line search. Starts run on a thread pool; the winner is the start
with the highest likelihood, the lowest start index on ties.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize_scalar
from scipy.spatial.distance import cdist

from config import FIT_EVALS_PER_START, FIT_STARTS, FIT_WORKERS
from exceptions import InvalidArgumentError, NumericalFailureError

logger = logging.getLogger(__name__)

LENGTHSCALE_BOUNDS = (1e-3, 10.0)
SIGNAL_VARIANCE_BOUNDS = (1e-4, 10.0)
NOISE_VARIANCE_BOUNDS = (1e-6, 1.0)
TASK_FACTOR_BOUNDS = (-3.0, 3.0)
TASK_DIAG_BOUNDS = (1e-6, 10.0)

JITTER_LEVELS = (1e-8, 1e-6, 1e-4)

# Evaluations granted to one coordinate line search
LINE_SEARCH_EVALS = 8
# Returned to the line search instead of -inf when a Cholesky fails
_REJECTED = 1e25


@dataclass(frozen=True, eq=False)
class KernelParams:
    """
    Hyperparameters of the ARD squared-exponential kernel and the Gaussian likelihood.

    Attributes:
        lengthscales (np.ndarray): One positive lengthscale per input dimension.
        signal_variance (float): Prior variance of the latent function.
        noise_variance (float): Observation noise variance.
    """

    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        lengthscales = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        if lengthscales.ndim != 1 or np.any(lengthscales <= 0):
            raise InvalidArgumentError("Lengthscales must be a vector of positive reals")
        if not self.signal_variance > 0:
            raise InvalidArgumentError("Signal variance must be positive")
        if not self.noise_variance >= 0:
            raise InvalidArgumentError("Noise variance must be non-negative")
        object.__setattr__(self, "lengthscales", lengthscales)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))

    @property
    def dimension(self) -> int:
        return self.lengthscales.shape[0]

    @classmethod
    def initial(cls, dimension: int) -> "KernelParams":
        return cls(np.full(dimension, 0.5), 1.0, 1e-2)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lengthscales": self.lengthscales.tolist(),
            "signal_variance": self.signal_variance,
            "noise_variance": self.noise_variance,
        }


@dataclass(frozen=True, eq=False)
class TaskKernel:
    """
    Coregionalization matrix B = L L^T + diag(v) over T tasks.

    Attributes:
        factor (np.ndarray): T x r matrix L.
        diag (np.ndarray): T non-negative reals v.
    """

    factor: np.ndarray
    diag: np.ndarray

    def __post_init__(self):
        factor = np.atleast_2d(np.asarray(self.factor, dtype=np.float64))
        diag = np.atleast_1d(np.asarray(self.diag, dtype=np.float64))
        if diag.ndim != 1 or factor.shape[0] != diag.shape[0]:
            raise InvalidArgumentError(
                f"Task factor {factor.shape} does not match diagonal {diag.shape}"
            )
        if np.any(diag < 0):
            raise InvalidArgumentError("Task kernel diagonal must be non-negative")
        object.__setattr__(self, "factor", factor)
        object.__setattr__(self, "diag", diag)
        if np.any(np.diag(self.matrix()) <= 0):
            raise InvalidArgumentError("Every task needs a positive prior variance B[t][t]")

    @property
    def num_tasks(self) -> int:
        return self.diag.shape[0]

    def matrix(self) -> np.ndarray:
        return self.factor @ self.factor.T + np.diag(self.diag)

    @classmethod
    def initial(cls, num_tasks: int) -> "TaskKernel":
        return cls(0.5 * np.eye(num_tasks), np.full(num_tasks, 0.1))

    @classmethod
    def identity(cls, num_tasks: int) -> "TaskKernel":
        return cls(np.zeros((num_tasks, num_tasks)), np.ones(num_tasks))

    def to_dict(self) -> Dict[str, Any]:
        return {"factor": self.factor.tolist(), "diag": self.diag.tolist()}


@dataclass(frozen=True)
class PosteriorGaussian:
    """Predictive mean and (clamped, non-negative) variance of the latent function."""

    mean: float
    variance: float

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def kernel_matrix(params: KernelParams, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    """ARD squared-exponential covariance between the rows of X1 and X2."""
    X1 = np.atleast_2d(X1)
    X2 = np.atleast_2d(X2)
    if X1.shape[1] != params.dimension or X2.shape[1] != params.dimension:
        raise InvalidArgumentError(
            f"Inputs of dimension {X1.shape[1]}/{X2.shape[1]}, "
            f"kernel has {params.dimension} lengthscales"
        )
    sq = cdist(X1 / params.lengthscales, X2 / params.lengthscales, metric="sqeuclidean")
    return params.signal_variance * np.exp(-0.5 * sq)


def base_kernel(params: KernelParams, x: np.ndarray, x2: np.ndarray) -> float:
    """
    sigma^2 * exp(-1/2 * sum_d ((x_d - x2_d) / l_d)^2).

    Raises:
        InvalidArgumentError: If the dimensions do not match the lengthscales.
    """
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x.shape != (params.dimension,) or x2.shape != (params.dimension,):
        raise InvalidArgumentError(
            f"Points of shape {x.shape}/{x2.shape}, kernel has {params.dimension} lengthscales"
        )
    return float(kernel_matrix(params, x[None, :], x2[None, :])[0, 0])


def _check_task(task_kernel: Optional[TaskKernel], task: int) -> None:
    num_tasks = 1 if task_kernel is None else task_kernel.num_tasks
    if not 0 <= int(task) < num_tasks:
        raise InvalidArgumentError(f"Task id {task} out of range [0, {num_tasks})")


def icm_kernel(
    params: KernelParams,
    task_kernel: TaskKernel,
    x: np.ndarray,
    m: int,
    x2: np.ndarray,
    m2: int,
) -> float:
    """
    Intrinsic coregionalization covariance base_kernel(x, x2) * B[m][m2].

    Raises:
        InvalidArgumentError: If a task id is out of range.
    """
    _check_task(task_kernel, m)
    _check_task(task_kernel, m2)
    return base_kernel(params, x, x2) * float(task_kernel.matrix()[m, m2])


def _covariance(
    params: KernelParams,
    task_kernel: Optional[TaskKernel],
    X: np.ndarray,
    tasks: np.ndarray,
) -> np.ndarray:
    K = kernel_matrix(params, X, X)
    if task_kernel is not None:
        B = task_kernel.matrix()
        K = K * B[np.ix_(tasks, tasks)]
    return K


def _factorize(
    K: np.ndarray, noise: float, jitter_levels: Sequence[float]
) -> Tuple[np.ndarray, float]:
    tried = []
    for jitter in jitter_levels:
        tried.append(jitter)
        regularized = K.copy()
        regularized[np.diag_indices_from(regularized)] += noise + jitter
        try:
            return cholesky(regularized, lower=True), jitter
        except np.linalg.LinAlgError:
            logger.warning(f"Cholesky failed with jitter {jitter:g}, escalating")
    raise NumericalFailureError("Covariance is not positive definite", tried)


@dataclass(frozen=True, eq=False)
class GPModel:
    """
    Fitted exact GP, immutable once built.

    Attributes:
        inputs (np.ndarray): (n, D) unit-cube training inputs.
        tasks (np.ndarray): (n,) task ids, all 0 for a single-task model.
        targets (np.ndarray): (n,) training targets.
        mean (float): Constant prior mean mu0.
        params (KernelParams): Base-kernel and noise hyperparameters.
        task_kernel (Optional[TaskKernel]): Coregionalization, None for a single-task model.
        jitter (float): Diagonal jitter that made the covariance factorizable.
        factor (np.ndarray): Lower Cholesky factor of K + (noise + jitter) I.
        alpha (np.ndarray): (K + (noise + jitter) I)^-1 (targets - mean).
    """

    inputs: np.ndarray
    tasks: np.ndarray
    targets: np.ndarray
    mean: float
    params: KernelParams
    task_kernel: Optional[TaskKernel]
    jitter: float
    factor: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.targets.shape[0]

    @property
    def dimension(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_tasks(self) -> int:
        return 1 if self.task_kernel is None else self.task_kernel.num_tasks

    @property
    def task_matrix(self) -> np.ndarray:
        if self.task_kernel is None:
            return np.ones((1, 1))
        return self.task_kernel.matrix()

    @property
    def diagonal_noise(self) -> float:
        """Total value added to the covariance diagonal (noise variance + jitter)."""
        return self.params.noise_variance + self.jitter

    def covariance(self) -> np.ndarray:
        """Noise-free training covariance K (base or ICM)."""
        return _covariance(self.params, self.task_kernel, self.inputs, self.tasks)

    def posterior_many(self, X: np.ndarray, task: int = 0) -> Tuple[np.ndarray, np.ndarray]:
        """
        Predictive means and variances at many query points for one task.

        Args:
            X (np.ndarray): (q, D) unit-cube query points.
            task (int): Task head to predict.

        Returns:
            tuple: (means, variances), both (q,) arrays; variances clamped at 0.
        """
        _check_task(self.task_kernel, task)
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        B = self.task_matrix
        K_star = kernel_matrix(self.params, self.inputs, X) * B[self.tasks, task][:, None]
        means = self.mean + K_star.T @ self.alpha
        V = solve_triangular(self.factor, K_star, lower=True)
        prior = self.params.signal_variance * B[task, task]
        variances = np.maximum(prior - np.einsum("ij,ij->j", V, V), 0.0)
        return means, variances

    def posterior(self, x: np.ndarray, task: int = 0) -> PosteriorGaussian:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dimension,):
            raise InvalidArgumentError(
                f"Query of shape {x.shape}, model has dimension {self.dimension}"
            )
        means, variances = self.posterior_many(x[None, :], task)
        return PosteriorGaussian(float(means[0]), float(variances[0]))

    def log_marginal_likelihood(self) -> float:
        residual = self.targets - self.mean
        return float(
            -0.5 * residual @ self.alpha
            - np.sum(np.log(np.diag(self.factor)))
            - 0.5 * self.n * math.log(2 * math.pi)
        )

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready replay document; the Cholesky factor is not stored."""
        return {
            "params": self.params.to_dict(),
            "task_kernel": None if self.task_kernel is None else self.task_kernel.to_dict(),
            "mean": self.mean,
            "jitter": self.jitter,
            "inputs": self.inputs.tolist(),
            "tasks": self.tasks.tolist(),
            "targets": self.targets.tolist(),
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "GPModel":
        """Rebuilds a model from `to_dict` output, refactorizing the covariance."""
        params = KernelParams(**document["params"])
        task_kernel = None
        if document.get("task_kernel") is not None:
            task_kernel = TaskKernel(**document["task_kernel"])
        jitter = float(document.get("jitter", JITTER_LEVELS[0]))
        levels = (jitter,) + tuple(j for j in JITTER_LEVELS if j > jitter)
        return build_model(
            np.asarray(document["inputs"], dtype=np.float64),
            np.asarray(document["targets"], dtype=np.float64),
            np.asarray(document["tasks"], dtype=int),
            params,
            task_kernel,
            mean=float(document["mean"]),
            jitter_levels=levels,
        )


def build_model(
    inputs: np.ndarray,
    targets: np.ndarray,
    tasks: Optional[np.ndarray],
    params: KernelParams,
    task_kernel: Optional[TaskKernel] = None,
    mean: Optional[float] = None,
    jitter_levels: Sequence[float] = JITTER_LEVELS,
) -> GPModel:
    """
    Conditions a GP with fixed hyperparameters on training data.

    Raises:
        InvalidArgumentError: On inconsistent shapes or task ids.
        NumericalFailureError: If the covariance stays indefinite after jitter escalation.
    """
    inputs, targets, tasks = _check_training_data(inputs, targets, tasks, task_kernel)
    if inputs.shape[1] != params.dimension:
        raise InvalidArgumentError(
            f"Inputs of dimension {inputs.shape[1]}, kernel has {params.dimension} lengthscales"
        )
    mu0 = float(np.mean(targets)) if mean is None else float(mean)
    K = _covariance(params, task_kernel, inputs, tasks)
    factor, jitter = _factorize(K, params.noise_variance, jitter_levels)
    alpha = cho_solve((factor, True), targets - mu0)
    return GPModel(inputs, tasks, targets, mu0, params, task_kernel, jitter, factor, alpha)


def _check_training_data(inputs, targets, tasks, task_kernel):
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    n = targets.shape[0]
    if n < 1:
        raise InvalidArgumentError("A GP needs at least one training point")
    if inputs.shape[0] != n:
        raise InvalidArgumentError(f"{inputs.shape[0]} inputs for {n} targets")
    tasks = np.zeros(n, dtype=int) if tasks is None else np.asarray(tasks, dtype=int)
    if tasks.shape != (n,):
        raise InvalidArgumentError(f"{tasks.shape[0]} task ids for {n} targets")
    num_tasks = 1 if task_kernel is None else task_kernel.num_tasks
    if np.any(tasks < 0) or np.any(tasks >= num_tasks):
        raise InvalidArgumentError(f"Task ids must lie in [0, {num_tasks})")
    return inputs, targets, tasks


class _Theta:
    """Packs hyperparameters into one search vector and back."""

    def __init__(self, dimension: int, num_tasks: Optional[int]):
        self.dimension = dimension
        self.num_tasks = num_tasks
        lower = [math.log(LENGTHSCALE_BOUNDS[0])] * dimension + [
            math.log(SIGNAL_VARIANCE_BOUNDS[0]),
            math.log(NOISE_VARIANCE_BOUNDS[0]),
        ]
        upper = [math.log(LENGTHSCALE_BOUNDS[1])] * dimension + [
            math.log(SIGNAL_VARIANCE_BOUNDS[1]),
            math.log(NOISE_VARIANCE_BOUNDS[1]),
        ]
        if num_tasks is not None:
            lower += [TASK_FACTOR_BOUNDS[0]] * num_tasks**2
            upper += [TASK_FACTOR_BOUNDS[1]] * num_tasks**2
            lower += [math.log(TASK_DIAG_BOUNDS[0])] * num_tasks
            upper += [math.log(TASK_DIAG_BOUNDS[1])] * num_tasks
        self.lower = np.array(lower)
        self.upper = np.array(upper)

    def pack(self, params: KernelParams, task_kernel: Optional[TaskKernel]) -> np.ndarray:
        parts = [
            np.log(params.lengthscales),
            [math.log(params.signal_variance), math.log(max(params.noise_variance, 1e-300))],
        ]
        if self.num_tasks is not None:
            parts.append(task_kernel.factor.reshape(-1))
            parts.append(np.log(np.maximum(task_kernel.diag, 1e-300)))
        return np.clip(np.concatenate(parts), self.lower, self.upper)

    def unpack(self, theta: np.ndarray) -> Tuple[KernelParams, Optional[TaskKernel]]:
        d = self.dimension
        params = KernelParams(np.exp(theta[:d]), math.exp(theta[d]), math.exp(theta[d + 1]))
        if self.num_tasks is None:
            return params, None
        t = self.num_tasks
        start = d + 2
        factor = theta[start : start + t * t].reshape(t, t)
        diag = np.exp(theta[start + t * t : start + t * t + t])
        return params, TaskKernel(factor, diag)


def _line_search_climb(
    objective, theta0: np.ndarray, lower: np.ndarray, upper: np.ndarray, budget: int
) -> Tuple[np.ndarray, float]:
    """
    Coordinate-wise bounded line searches; a move is kept only if it improves.

    Each sweep splits the remaining evaluations over the coordinates still to visit (at
    most LINE_SEARCH_EVALS, at least 2 per line), so a budget of 1 + 2 * len(theta0)
    searches every coordinate at least once.
    """
    best = theta0.copy()
    best_value = objective(best)
    evaluations = 1
    half_width = 0.5 * (upper - lower)
    coordinates = best.shape[0]
    while evaluations < budget and np.max(half_width) > 1e-3:
        improved = False
        for d in range(coordinates):
            remaining = budget - evaluations
            if remaining < 2:
                break
            per_line = max(2, min(LINE_SEARCH_EVALS, remaining // (coordinates - d)))
            a = max(lower[d], best[d] - half_width[d])
            b = min(upper[d], best[d] + half_width[d])
            if b - a < 1e-9:
                continue

            def negative(value, d=d):
                trial = best.copy()
                trial[d] = value
                result = objective(trial)
                return -result if np.isfinite(result) else _REJECTED

            found = minimize_scalar(
                negative,
                bounds=(a, b),
                method="bounded",
                options={"maxiter": per_line, "xatol": 1e-4},
            )
            evaluations += found.nfev
            if found.fun < _REJECTED and -found.fun > best_value:
                best[d] = found.x
                best_value = -found.fun
                improved = True
        half_width *= 0.7 if improved else 0.4
    return best, best_value


def _lml_at(
    theta: np.ndarray,
    packer: _Theta,
    inputs: np.ndarray,
    tasks: np.ndarray,
    residual: np.ndarray,
) -> float:
    try:
        params, task_kernel = packer.unpack(theta)
    except InvalidArgumentError:
        return -math.inf
    K = _covariance(params, task_kernel, inputs, tasks)
    K[np.diag_indices_from(K)] += params.noise_variance + JITTER_LEVELS[0]
    try:
        L = cholesky(K, lower=True)
    except np.linalg.LinAlgError:
        return -math.inf
    alpha = cho_solve((L, True), residual)
    return float(
        -0.5 * residual @ alpha
        - np.sum(np.log(np.diag(L)))
        - 0.5 * residual.shape[0] * math.log(2 * math.pi)
    )


def fit(
    inputs: np.ndarray,
    targets: np.ndarray,
    tasks: Optional[np.ndarray] = None,
    num_tasks: Optional[int] = None,
    params: Optional[KernelParams] = None,
    task_kernel: Optional[TaskKernel] = None,
    optimize: bool = True,
    mean: Optional[float] = None,
    seed: int = 0,
    starts: int = FIT_STARTS,
    evals_per_start: int = FIT_EVALS_PER_START,
) -> GPModel:
    """
    Fits an exact GP, single-task or ICM, by maximizing the log marginal likelihood.

    Args:
        inputs (np.ndarray): (n, D) unit-cube points.
        targets (np.ndarray): (n,) targets.
        tasks (Optional[np.ndarray]): (n,) task ids; None means single-task.
        num_tasks (Optional[int]): Number of tasks T of an ICM model; None for a plain GP.
        params (Optional[KernelParams]): Initial (or fixed) kernel hyperparameters.
        task_kernel (Optional[TaskKernel]): Initial (or fixed) coregionalization.
        optimize (bool): When False the given hyperparameters are used as they are.
        mean (Optional[float]): Constant mean; defaults to the mean of the targets.
        seed (int): Seed of the generator that draws the random starts.
        starts (int): Number of starts; start 0 is the initial hyperparameters.
        evals_per_start (int): Likelihood evaluations granted to each start.

    Returns:
        GPModel: Conditioned model with the selected hyperparameters.

    Raises:
        InvalidArgumentError: On inconsistent data.
        NumericalFailureError: If the final covariance cannot be factorized.

    Example:
        model = fit(X, y)
        model.posterior(X[0])
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    dimension = inputs.shape[1]
    if num_tasks is None and task_kernel is not None:
        num_tasks = task_kernel.num_tasks
    if num_tasks is not None and task_kernel is None:
        task_kernel = TaskKernel.initial(num_tasks)
    if params is None:
        params = KernelParams.initial(dimension)
    if params.dimension != dimension:
        raise InvalidArgumentError(
            f"Inputs of dimension {dimension}, kernel has {params.dimension} lengthscales"
        )
    inputs, targets, tasks = _check_training_data(inputs, targets, tasks, task_kernel)
    mu0 = float(np.mean(targets)) if mean is None else float(mean)

    if optimize:
        packer = _Theta(dimension, num_tasks)
        residual = targets - mu0

        def objective(theta):
            return _lml_at(theta, packer, inputs, tasks, residual)

        rng = np.random.default_rng(seed)
        initial = [packer.pack(params, task_kernel)]
        for _ in range(max(starts, 1) - 1):
            initial.append(rng.uniform(packer.lower, packer.upper))

        def run_start(theta0):
            return _line_search_climb(
                objective, theta0, packer.lower, packer.upper, evals_per_start
            )

        with ThreadPoolExecutor(max_workers=FIT_WORKERS) as executor:
            results: List[Tuple[np.ndarray, float]] = list(executor.map(run_start, initial))

        best_index = 0
        for i, (_, value) in enumerate(results):
            if value > results[best_index][1]:
                best_index = i
        theta, value = results[best_index]
        if np.isfinite(value):
            params, task_kernel = packer.unpack(theta)
            logger.debug(
                f"GP fit n={targets.shape[0]} D={dimension} T={num_tasks or 1}: "
                f"lml={value:.4f} from start {best_index}"
            )
        else:
            logger.warning("No start produced a finite likelihood, keeping initial values")

    return build_model(inputs, targets, tasks, params, task_kernel, mean=mu0)


def posterior(model: GPModel, x: np.ndarray, task: int = 0) -> PosteriorGaussian:
    return model.posterior(x, task)


def log_marginal_likelihood(model: GPModel) -> float:
    return model.log_marginal_likelihood()
