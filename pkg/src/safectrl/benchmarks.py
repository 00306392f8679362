"""Safety-thresholded synthetic benchmarks and regret statistics.

All functions are the usual minimization benchmarks negated, so larger is
better and the safety constraint is a lower threshold on the same value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .safe_sets import BoxDomain


class BenchmarkError(ValueError):
    pass


class DomainError(BenchmarkError):
    pass


class SeedNotFoundError(BenchmarkError):
    pass


class AggregationError(BenchmarkError):
    pass


CAMELBACK_DOMAIN = BoxDomain(np.array([-2.0, -1.0]), np.array([2.0, 1.0]))
HARTMANN6_DOMAIN = BoxDomain(np.zeros(6), np.ones(6))
GAUSSIAN10_DOMAIN = BoxDomain(-np.ones(10), np.ones(10))

HARTMANN6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
HARTMANN6_A = np.array(
    [
        [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
        [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
        [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
        [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
    ]
)
HARTMANN6_P = 1e-4 * np.array(
    [
        [1312, 1696, 5569, 124, 8283, 5886],
        [2329, 4135, 8307, 3736, 1004, 9991],
        [2348, 1451, 3522, 2883, 3047, 6650],
        [4047, 8828, 8732, 5743, 1091, 381],
    ]
)


def _check_domain(x: np.ndarray, domain: BoxDomain, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != domain.dim:
        raise DomainError(f"{name} expects {domain.dim}-vectors, got shape {x.shape}")
    if not np.all(domain.contains(x, tol=1e-9)):
        raise DomainError(f"{name}: point outside {domain.lower}..{domain.upper}")
    return x


def camelback_eval(x) -> float | np.ndarray:
    """Negated six-hump camelback on [-2, 2] x [-1, 1]."""
    x = _check_domain(x, CAMELBACK_DOMAIN, "camelback")
    u, v = x[..., 0], x[..., 1]
    f = (4.0 - 2.1 * u**2 + u**4 / 3.0) * u**2 + u * v + (-4.0 + 4.0 * v**2) * v**2
    return -f


def hartmann6_eval(x) -> float | np.ndarray:
    """Negated Hartmann-6 on the unit cube."""
    x = _check_domain(x, HARTMANN6_DOMAIN, "hartmann6")
    diff = x[..., None, :] - HARTMANN6_P
    inner = np.sum(HARTMANN6_A * diff**2, axis=-1)
    return np.sum(HARTMANN6_ALPHA * np.exp(-inner), axis=-1)


def gaussian10_eval(x) -> float | np.ndarray:
    """exp(-4 |x|^2) on [-1, 1]^10."""
    x = _check_domain(x, GAUSSIAN10_DOMAIN, "gaussian10")
    return np.exp(-4.0 * np.sum(x**2, axis=-1))


@dataclass(frozen=True)
class BenchmarkProblem:
    name: str
    domain: BoxDomain
    func: Callable[[np.ndarray], np.ndarray]
    true_optimum_value: float
    safety_threshold: float
    iteration_budget: int
    stage_switch_default: int
    optimum_point: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.true_optimum_value > self.safety_threshold:
            raise BenchmarkError("optimum must exceed the safety threshold")

    def __call__(self, x) -> float | np.ndarray:
        return self.func(x)

    @property
    def value_range(self) -> float:
        """Span of the values a safe optimizer can observe, threshold to optimum."""
        return self.true_optimum_value - self.safety_threshold

    @property
    def default_noise_std(self) -> float:
        return 0.01 * self.value_range


CAMELBACK2D = BenchmarkProblem(
    name="camelback2d",
    domain=CAMELBACK_DOMAIN,
    func=camelback_eval,
    true_optimum_value=1.0316,
    safety_threshold=0.0,
    iteration_budget=150,
    stage_switch_default=15,
    optimum_point=np.array([0.0898, -0.7126]),
)
HARTMANN6D = BenchmarkProblem(
    name="hartmann6d",
    domain=HARTMANN6_DOMAIN,
    func=hartmann6_eval,
    true_optimum_value=3.32237,
    safety_threshold=0.3,
    iteration_budget=200,
    stage_switch_default=50,
    optimum_point=np.array([0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573]),
)
GAUSSIAN10D = BenchmarkProblem(
    name="gaussian10d",
    domain=GAUSSIAN10_DOMAIN,
    func=gaussian10_eval,
    true_optimum_value=1.0,
    safety_threshold=0.1,
    iteration_budget=200,
    stage_switch_default=50,
    optimum_point=np.zeros(10),
)

BENCHMARKS: dict[str, BenchmarkProblem] = {
    p.name: p for p in (CAMELBACK2D, HARTMANN6D, GAUSSIAN10D)
}


_ALIASES = {
    "camelback": "camelback2d",
    "camelback2d": "camelback2d",
    "hartmann": "hartmann6d",
    "hartmann6": "hartmann6d",
    "hartmann6d": "hartmann6d",
    "gaussian": "gaussian10d",
    "gaussian10": "gaussian10d",
    "gaussian10d": "gaussian10d",
}


def get_benchmark(name: str) -> BenchmarkProblem:
    key = _ALIASES.get(name.lower().replace("_", "").replace("-", ""))
    if key is None:
        raise BenchmarkError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}")
    return BENCHMARKS[key]


@dataclass(frozen=True)
class SeedSample:
    point: np.ndarray
    value: float
    attempts: int


def sample_safe_seed(
    problem: BenchmarkProblem,
    rng: np.random.Generator,
    cap: int = 10**6,
    batch: int = 4096,
) -> SeedSample:
    """Uniform rejection sampling of a point strictly above the threshold."""
    attempts = 0
    while attempts < cap:
        n = min(batch, cap - attempts)
        pts = problem.domain.sample(rng, n)
        vals = problem(pts)
        ok = np.flatnonzero(vals > problem.safety_threshold)
        if ok.size:
            j = int(ok[0])
            return SeedSample(pts[j], float(vals[j]), attempts + j + 1)
        attempts += n
    raise SeedNotFoundError(f"no safe seed for {problem.name} within {cap} attempts")


def aggregate_regret(results: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Per-iteration mean and standard error of simple regret across repetitions.

    Accepts campaign results (anything with ``regret_series()``) or raw arrays.
    """
    if len(results) == 0:
        raise AggregationError("nothing to aggregate")
    series = [np.asarray(r.regret_series() if hasattr(r, "regret_series") else r, float) for r in results]
    lengths = {s.size for s in series}
    if len(lengths) != 1:
        raise AggregationError(f"mixed iteration budgets: {sorted(lengths)}")
    M = np.vstack(series)
    mean = M.mean(axis=0)
    if M.shape[0] == 1:
        return mean, np.zeros_like(mean)
    se = M.std(axis=0, ddof=1) / math.sqrt(M.shape[0])
    return mean, se


@dataclass(frozen=True)
class OptimumCheck:
    name: str
    found_value: float
    configured_value: float
    found_point: np.ndarray

    @property
    def error(self) -> float:
        return abs(self.found_value - self.configured_value)


def validate_optimum(
    problem: BenchmarkProblem,
    rng: np.random.Generator,
    n_samples: int = 10**6,
    n_polish: int = 5,
    chunk: int = 100_000,
) -> OptimumCheck:
    """Random search followed by L-BFGS-B polish from the best samples."""
    best_pts, best_vals = [], []
    for start in range(0, n_samples, chunk):
        pts = problem.domain.sample(rng, min(chunk, n_samples - start))
        vals = problem(pts)
        top = np.argsort(vals)[-n_polish:]
        best_pts.append(pts[top])
        best_vals.append(vals[top])
    pts = np.vstack(best_pts)
    vals = np.concatenate(best_vals)
    starts = pts[np.argsort(vals)[-n_polish:]]
    bounds = list(zip(problem.domain.lower, problem.domain.upper))
    best_x, best_v = None, -np.inf
    for x0 in starts:
        res = minimize(lambda x: -float(problem(x)), x0, method="L-BFGS-B", bounds=bounds)
        v = float(problem(problem.domain.clip(res.x)))
        if v > best_v:
            best_x, best_v = problem.domain.clip(res.x), v
    return OptimumCheck(problem.name, best_v, problem.true_optimum_value, best_x)
