"""YAML experiment configuration.

A config file has these sections::

    experiment: bench | tune
    problem:     benchmark name (bench) or plant/weights/thresholds (tune)
    methods:     list of method names
    optimizer:   iterations, stage_switch, beta, band, prior mean, ...
    kernels:     one entry per function (lengthscales, variance, ...)
    candidates:  grid / pool / swarm settings
    run:         seed, reps, out, workers

Missing keys take defaults; unknown keys are rejected.  The environment
variables ``SAFECTRL_OUT`` and ``SAFECTRL_WORKERS`` override the output
directory and the worker count.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .benchmarks import BenchmarkError, get_benchmark
from .control_sim import (
    GAIN_NAMES,
    CascadePlant,
    ControlSimError,
    ControllerGains,
    ObjectiveWeights,
    tuning_problem,
)
from .optimizers import (
    BetaMode,
    CandidateConfig,
    KernelConfig,
    Method,
    OptimizerConfig,
    OptimizerError,
)
from .problem import Problem, from_benchmark, from_tuning

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    reps: int = 1
    out: str = "results"
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    problem: dict
    methods: tuple[Method, ...]
    optimizer: dict
    kernels: tuple[KernelConfig, ...]
    candidates: CandidateConfig
    run: RunSettings
    source: str | None = None

    def build_problem(self) -> Problem:
        try:
            if self.experiment == "bench":
                bench = get_benchmark(self.problem["benchmark"])
                return from_benchmark(bench, self.problem.get("noise_std"))
            task = tuning_problem(
                CascadePlant(**self.problem.get("plant", {})),
                ObjectiveWeights(**self.problem.get("weights", {})),
                tuple(self.problem.get("thresholds", (0.0, 0.0))),
                ControllerGains(**self.problem.get("seed_gains", {})),
            )
            return from_tuning(task, self.problem.get("noise_std", (0.1, 0.1, 0.1)))
        except (BenchmarkError, ControlSimError, TypeError, KeyError) as exc:
            raise ConfigError(f"invalid problem section: {exc}") from exc

    def optimizer_config(self, method: Method | str, rng_seed: int | None = None, trace_sets: bool = False) -> OptimizerConfig:
        o = self.optimizer
        try:
            return OptimizerConfig(
                method=Method(method),
                total_iterations=int(o["iterations"]),
                stage_switch_T0=int(o["stage_switch"]),
                kernels=self.kernels,
                beta=BetaMode(**o.get("beta", {})),
                candidates=self.candidates,
                rng_seed=self.run.seed if rng_seed is None else int(rng_seed),
                boundary_band=_tuple_or_float(o.get("boundary_band", 0.05)),
                expander_mode=o.get("expander_mode", "all"),
                prior_mean=o.get("prior_mean", "seed"),
                prior_mean_offset=float(o.get("prior_mean_offset", 0.0)),
                model_noise_scale=float(o.get("model_noise_scale", 1.0)),
                force_seed_safe=bool(o.get("force_seed_safe", True)),
                refactor_every=int(o.get("refactor_every", 32)),
                trace_sets=trace_sets,
            )
        except (OptimizerError, TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid optimizer section: {exc}") from exc

    def to_dict(self) -> dict:
        d = {
            "experiment": self.experiment,
            "problem": copy.deepcopy(self.problem),
            "methods": [m.value for m in self.methods],
            "optimizer": copy.deepcopy(self.optimizer),
            "kernels": [_kernel_dict(k) for k in self.kernels],
            "candidates": _plain(asdict(self.candidates)),
            "run": asdict(self.run),
        }
        return d

    def with_run(self, **overrides) -> "ExperimentConfig":
        clean = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, run=replace(self.run, **clean))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _kernel_dict(k: KernelConfig) -> dict:
    d = _plain(asdict(k))
    if k.kind is not None:
        d["kind"] = str(getattr(k.kind, "value", k.kind))
    return {key: v for key, v in d.items() if v is not None}


def _tuple_or_float(v):
    return tuple(float(x) for x in v) if isinstance(v, (list, tuple)) else float(v)


_TOP_KEYS = {"experiment", "problem", "methods", "optimizer", "kernels", "candidates", "run"}
_OPT_KEYS = {"iterations", "stage_switch", "beta", "boundary_band", "expander_mode",
             "prior_mean", "prior_mean_offset", "model_noise_scale", "force_seed_safe",
             "refactor_every"}
_BENCH_KEYS = {"benchmark", "noise_std"}
_TUNE_KEYS = {"plant", "weights", "thresholds", "seed_gains", "noise_std"}


def _reject_unknown(section: str, data: dict, allowed: set[str]):
    extra = set(data) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {section}: {sorted(extra)}")


def _dataclass_from(cls, data: dict | None, section: str):
    data = dict(data or {})
    _reject_unknown(section, data, {f.name for f in fields(cls)})
    for k, v in list(data.items()):
        if isinstance(v, list):
            data[k] = tuple(v)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from exc


def parse_config(data: dict[str, Any], source: str | None = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    _reject_unknown("config", data, _TOP_KEYS)
    experiment = data.get("experiment")
    if experiment not in ("bench", "tune"):
        raise ConfigError(f"experiment must be 'bench' or 'tune', got {experiment!r}")
    problem = dict(data.get("problem") or {})
    _reject_unknown("problem", problem, _BENCH_KEYS if experiment == "bench" else _TUNE_KEYS)
    if experiment == "bench" and "benchmark" not in problem:
        raise ConfigError("problem.benchmark is required")
    if experiment == "tune" and "seed_gains" in problem:
        _reject_unknown("problem.seed_gains", problem["seed_gains"], set(GAIN_NAMES))

    optimizer = dict(data.get("optimizer") or {})
    _reject_unknown("optimizer", optimizer, _OPT_KEYS)
    if experiment == "bench":
        bench = get_benchmark(problem["benchmark"]) if _known_benchmark(problem["benchmark"]) else None
        if bench is None:
            raise ConfigError(f"unknown benchmark {problem['benchmark']!r}")
        optimizer.setdefault("iterations", bench.iteration_budget)
        optimizer.setdefault("stage_switch", bench.stage_switch_default)
    else:
        optimizer.setdefault("iterations", 100)
        optimizer.setdefault("stage_switch", 30)

    try:
        methods = tuple(Method(m) for m in data.get("methods", ["safectrlbo"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not methods:
        raise ConfigError("at least one method is required")

    raw_kernels = data.get("kernels")
    if not raw_kernels:
        raise ConfigError("kernels section is required (one entry per function)")
    kernels = []
    for i, k in enumerate(raw_kernels):
        k = dict(k)
        if "lengthscales" not in k:
            raise ConfigError(f"kernels[{i}].lengthscales is required")
        k["lengthscales"] = tuple(k["lengthscales"]) if isinstance(k["lengthscales"], list) else (k["lengthscales"],)
        kernels.append(_dataclass_from(KernelConfig, k, f"kernels[{i}]"))

    cfg = ExperimentConfig(
        experiment=experiment,
        problem=problem,
        methods=methods,
        optimizer=optimizer,
        kernels=tuple(kernels),
        candidates=_dataclass_from(CandidateConfig, data.get("candidates"), "candidates"),
        run=_dataclass_from(RunSettings, data.get("run"), "run"),
        source=source,
    )
    # fail early on anything the builders would reject
    problem_obj = cfg.build_problem()
    if len(cfg.kernels) != problem_obj.n_functions:
        raise ConfigError(f"{len(cfg.kernels)} kernel entries for {problem_obj.n_functions} functions")
    for m in methods:
        cfg.optimizer_config(m)
    return cfg


def _known_benchmark(name: str) -> bool:
    try:
        get_benchmark(name)
    except BenchmarkError:
        return False
    return True


def apply_env(cfg: ExperimentConfig, environ=os.environ) -> ExperimentConfig:
    out = environ.get("SAFECTRL_OUT")
    workers = environ.get("SAFECTRL_WORKERS")
    if workers is not None:
        try:
            workers = int(workers)
        except ValueError as exc:
            raise ConfigError(f"SAFECTRL_WORKERS must be an integer, got {workers!r}") from exc
    return cfg.with_run(out=out, workers=workers)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        named = CONFIG_DIR / f"{path}.yaml"
        if named.exists():
            path = named
        else:
            raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(data, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
