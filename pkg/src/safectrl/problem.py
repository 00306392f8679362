"""Generic constrained problem consumed by the campaign runner.

Function 0 is the performance objective.  Every function with a finite
threshold is a safety constraint, so a benchmark whose objective is also
its own constraint has a single function with a finite threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .benchmarks import BenchmarkProblem, sample_safe_seed
from .control_sim import TuningProblem
from .safe_sets import BoxDomain


class ProblemError(ValueError):
    pass


@dataclass(frozen=True)
class Problem:
    name: str
    domain: BoxDomain
    evaluate: Callable[[np.ndarray], np.ndarray]
    thresholds: np.ndarray
    noise_std: np.ndarray
    function_names: tuple[str, ...] = ("f",)
    optimum_value: float | None = None
    seed_point: np.ndarray | None = None
    seed_sampler: Callable[[np.random.Generator], np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        h = np.atleast_1d(np.asarray(self.thresholds, dtype=float))
        s = np.broadcast_to(np.asarray(self.noise_std, dtype=float), h.shape).copy()
        if len(self.function_names) != h.size:
            raise ProblemError("one name per function is required")
        if np.any(s < 0):
            raise ProblemError("noise_std must be nonnegative")
        if not np.any(np.isfinite(h)):
            raise ProblemError("at least one function needs a finite threshold")
        if self.seed_point is None and self.seed_sampler is None:
            raise ProblemError("a seed point or a seed sampler is required")
        object.__setattr__(self, "thresholds", h)
        object.__setattr__(self, "noise_std", s)

    @property
    def n_functions(self) -> int:
        return self.thresholds.size

    @property
    def constraint_indices(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.thresholds))

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        if self.seed_point is not None:
            return np.asarray(self.seed_point, dtype=float).copy()
        return np.asarray(self.seed_sampler(rng), dtype=float)

    def true_values(self, x) -> np.ndarray:
        v = np.atleast_1d(np.asarray(self.evaluate(np.asarray(x, dtype=float)), dtype=float))
        if v.shape != (self.n_functions,):
            raise ProblemError(f"evaluator returned shape {v.shape}, expected ({self.n_functions},)")
        return v

    def with_noise(self, noise_std: Sequence[float] | float) -> "Problem":
        from dataclasses import replace

        return replace(self, noise_std=np.broadcast_to(np.asarray(noise_std, float), self.thresholds.shape).copy())


def from_benchmark(bench: BenchmarkProblem, noise_std: float | None = None) -> Problem:
    noise = bench.default_noise_std if noise_std is None else float(noise_std)
    return Problem(
        name=bench.name,
        domain=bench.domain,
        evaluate=lambda x: np.array([float(bench(x))]),
        thresholds=np.array([bench.safety_threshold]),
        noise_std=np.array([noise]),
        function_names=("f",),
        optimum_value=bench.true_optimum_value,
        seed_sampler=lambda rng: sample_safe_seed(bench, rng).point,
        meta={"iteration_budget": bench.iteration_budget, "stage_switch": bench.stage_switch_default},
    )


def from_tuning(task: TuningProblem, noise_std: Sequence[float] = (0.1, 0.1, 0.1)) -> Problem:
    return Problem(
        name="cascade_pi",
        domain=task.domain,
        evaluate=task,
        thresholds=np.array([-np.inf, *task.thresholds]),
        noise_std=np.asarray(noise_std, dtype=float),
        function_names=TuningProblem.function_names,
        optimum_value=None,
        seed_point=task.seed_gains.as_array(),
        meta={"task": task},
    )
