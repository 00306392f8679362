"""Safe Bayesian optimization loops and the campaign runner.

Four acquisition rules share one loop:

* ``SAFECTRLBO``: max performance std over the safe boundary set while
  ``n <= T0``, then GP-UCB over the safe set; additive kernels.
* ``SAFEOPT``: max performance std over expanders and maximizers.
* ``STAGEOPT``: max performance std over expanders while ``n <= T0``, then
  GP-UCB; full RBF kernels.
* ``ABLATION``: the SafeCtrlBO staging with full RBF kernels.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .gp import (
    GPState,
    PosteriorCache,
    beta_schedule,
    bounds_from_moments,
    empirical_information_gain,
    gp_update,
    posterior,
)
from .kernels import KernelKind, KernelSpec
from .problem import Problem
from .safe_sets import (
    BoxDomain,
    EmptySafeSetError,
    compute_boundary_set,
    compute_maximizer_set,
    first_expander,
    is_expander,
    masked_argmax,
)


class OptimizerError(ValueError):
    pass


class CampaignAborted(RuntimeError):
    """Raised when a campaign cannot continue; ``partial`` holds the records so far."""

    def __init__(self, message: str, partial: "CampaignResult | None" = None):
        super().__init__(message)
        self.partial = partial


class Method(str, Enum):
    SAFECTRLBO = "safectrlbo"
    SAFEOPT = "safeopt"
    STAGEOPT = "stageopt"
    ABLATION = "ablation"

    @property
    def stagewise(self) -> bool:
        return self is not Method.SAFEOPT

    @property
    def uses_boundary(self) -> bool:
        return self in (Method.SAFECTRLBO, Method.ABLATION)

    @property
    def default_kernel(self) -> KernelKind:
        return KernelKind.ADDITIVE if self is Method.SAFECTRLBO else KernelKind.FULL_RBF


class Stage(str, Enum):
    EXPANSION = "expansion"
    MAXIMIZATION = "maximization"
    SEED = "seed"


@dataclass(frozen=True)
class BetaMode:
    """Constant confidence multiplier, or the information-gain schedule."""

    kind: str = "constant"
    value: float = 2.0
    rkhs_bound: float = 1.0
    noise_bound: float = 0.01
    delta: float = 0.05

    def __post_init__(self):
        if self.kind not in ("constant", "theoretical"):
            raise OptimizerError(f"unknown beta mode {self.kind!r}")
        if self.kind == "constant" and not self.value > 0:
            raise OptimizerError("beta must be positive")

    def at(self, t: int, states: Sequence[GPState]) -> float:
        if self.kind == "constant":
            return self.value
        gamma = max(empirical_information_gain(s) for s in states)
        return beta_schedule(t, self.rkhs_bound, self.noise_bound, self.delta, gamma)


@dataclass(frozen=True)
class KernelConfig:
    """Hyperparameters of one function's GP; the kernel kind comes from the method."""

    lengthscales: tuple[float, ...]
    variance: float = 1.0
    max_order: int | None = None
    order_weights: tuple[float, ...] | None = None
    kind: KernelKind | None = None

    def build(self, method: Method, dim: int) -> KernelSpec:
        ls = np.broadcast_to(np.asarray(self.lengthscales, dtype=float), (dim,))
        kind = KernelKind(self.kind) if self.kind is not None else method.default_kernel
        if kind is KernelKind.FULL_RBF:
            return KernelSpec.full_rbf(ls, self.variance)
        return KernelSpec.additive(
            ls, 1.0, max_order=self.max_order, order_weights=self.order_weights, total_variance=self.variance
        )


@dataclass(frozen=True)
class CandidateConfig:
    """How the discrete candidate set is built and grown.

    ``grid`` is used up to ``grid_max_dim`` dimensions.  Above that a pool
    of Gaussian perturbations around every evaluated point is grown, with
    per-dimension std ``scale * width / sqrt(d)``, plus uniform samples.
    """

    grid_resolution: tuple[int, ...] | int = 41
    grid_max_dim: int = 3
    pool_initial: int = 400
    pool_per_iteration: int = 60
    pool_scales: tuple[float, ...] = (0.02, 0.05, 0.1, 0.2, 0.4)
    pool_uniform: int = 10
    swarm: bool = False
    swarm_particles: int = 50
    swarm_sweeps: int = 20
    swarm_inertia: float = 0.7
    swarm_cognitive: float = 1.5
    swarm_social: float = 1.5


@dataclass(frozen=True)
class OptimizerConfig:
    method: Method
    total_iterations: int
    stage_switch_T0: int
    kernels: tuple[KernelConfig, ...]
    beta: BetaMode = BetaMode()
    candidates: CandidateConfig = CandidateConfig()
    rng_seed: int = 0
    # per-constraint band for the boundary set, in function units
    boundary_band: tuple[float, ...] | float = 0.05
    expander_mode: str = "all"
    # "seed": prior mean at the seed observation; "threshold": constrained
    # functions revert to their threshold away from data
    prior_mean: str = "seed"
    # subtracted from the threshold prior mean, in prior standard deviations
    prior_mean_offset: float = 0.0
    # GP noise std = model_noise_scale * the problem's observation noise std
    model_noise_scale: float = 1.0
    force_seed_safe: bool = True
    refactor_every: int = 32
    trace_sets: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.total_iterations < 0:
            raise OptimizerError("total_iterations must be nonnegative")
        if self.method.stagewise and not 0 < self.stage_switch_T0 <= max(self.total_iterations, 1):
            raise OptimizerError("need 0 < stage_switch_T0 <= total_iterations")
        if not self.kernels:
            raise OptimizerError("one kernel config per function is required")
        if not self.model_noise_scale > 0:
            raise OptimizerError("model_noise_scale must be positive")
        if self.prior_mean not in ("seed", "threshold"):
            raise OptimizerError(f"unknown prior_mean {self.prior_mean!r}")
        if self.expander_mode not in ("all", "any"):
            raise OptimizerError(f"unknown expander mode {self.expander_mode!r}")

    def echo(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        for k in d["kernels"]:
            if k["kind"] is not None:
                k["kind"] = KernelKind(k["kind"]).value
        return d


@dataclass
class IterationRecord:
    iteration: int
    chosen_point: np.ndarray
    noisy_values: np.ndarray
    true_values: np.ndarray
    stage: Stage
    violation_flags: np.ndarray
    simple_regret: float
    best_value: float
    wall_time_ms: float
    safe_count: int = 0
    trace: dict | None = None


@dataclass
class CampaignResult:
    records: list[IterationRecord]
    best_point: np.ndarray
    best_value: float
    total_violations: int
    config_echo: dict
    problem_name: str = ""
    function_names: tuple[str, ...] = ("f",)
    constraint_indices: tuple[int, ...] = (0,)
    seed_point: np.ndarray | None = None

    def regret_series(self) -> np.ndarray:
        return np.array([r.simple_regret for r in self.records])

    def best_series(self) -> np.ndarray:
        return np.array([r.best_value for r in self.records])

    def violations_by_constraint(self) -> dict[str, int]:
        counts = np.sum([r.violation_flags for r in self.records], axis=0)
        return {self.function_names[c]: int(n) for c, n in zip(self.constraint_indices, np.atleast_1d(counts))}


# ---------------------------------------------------------------- acquisition


@dataclass
class LoopView:
    """Everything a step rule needs at iteration ``n``."""

    caches: list[PosteriorCache]
    constraint_idx: np.ndarray
    thresholds: np.ndarray
    beta: float
    safe_mask: np.ndarray
    margins: np.ndarray
    tiebreak: np.ndarray
    band: np.ndarray
    expander_mode: str = "all"

    @property
    def perf(self) -> PosteriorCache:
        return self.caches[0]

    @property
    def constraint_caches(self) -> list[PosteriorCache]:
        return [self.caches[i] for i in self.constraint_idx]


def _check_safe(view: LoopView):
    if not np.any(view.safe_mask):
        raise EmptySafeSetError("safe set is empty; the seed is not certified safe under the prior")


def boundary_mask(view: LoopView) -> np.ndarray:
    return compute_boundary_set(view.margins, view.safe_mask, view.band)


def boundary_step(view: LoopView) -> int:
    """Largest performance std over the safe boundary set."""
    _check_safe(view)
    return masked_argmax(view.perf.std, boundary_mask(view), view.tiebreak)


def ucb_step(view: LoopView) -> int:
    _check_safe(view)
    b = view.perf.bounds(view.beta)
    return masked_argmax(b.upper, view.safe_mask, view.tiebreak)


def _ordered_safe(view: LoopView, values: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(view.safe_mask)
    return idx[np.lexsort((view.tiebreak[idx], -values[idx]))]


def expander_step(view: LoopView, include_maximizers: bool) -> int:
    """Largest performance std over ``E_n`` (and ``M_n`` when requested).

    Candidates are visited in decreasing std, so only those with a larger
    std than the best maximizer need the expensive expander test.
    """
    _check_safe(view)
    std = view.perf.std
    order = _ordered_safe(view, std)
    h = view.thresholds[view.constraint_idx]
    unsafe_idx = np.flatnonzero(~view.safe_mask)
    if include_maximizers:
        mmask = compute_maximizer_set(view.perf.bounds(view.beta), view.safe_mask)
        first_m = int(np.argmax(mmask[order]))
        hit = first_expander(view.constraint_caches, order[:first_m], unsafe_idx, view.beta, h, view.expander_mode)
        return int(order[first_m]) if hit is None else hit
    hit = first_expander(view.constraint_caches, order, unsafe_idx, view.beta, h, view.expander_mode)
    # no expander left: keep shrinking uncertainty on the safe set
    return int(order[0]) if hit is None else hit


def expander_mask(view: LoopView) -> np.ndarray:
    """Full ``E_n`` mask; used for traces and tests, not inside the loop."""
    unsafe_idx = np.flatnonzero(~view.safe_mask)
    h = view.thresholds[view.constraint_idx]
    mask = np.zeros_like(view.safe_mask)
    for i in np.flatnonzero(view.safe_mask):
        mask[i] = is_expander(view.constraint_caches, i, unsafe_idx, view.beta, h, view.expander_mode)
    return mask


def safectrlbo_step(view: LoopView, n: int, T0: int) -> int:
    return boundary_step(view) if n <= T0 else ucb_step(view)


def safeopt_step(view: LoopView) -> int:
    return expander_step(view, include_maximizers=True)


def stageopt_step(view: LoopView, n: int, T0: int) -> int:
    return expander_step(view, include_maximizers=False) if n <= T0 else ucb_step(view)


def ablation_step(view: LoopView, n: int, T0: int) -> int:
    return safectrlbo_step(view, n, T0)


def select(method: Method, view: LoopView, n: int, T0: int) -> tuple[int, Stage]:
    if method is Method.SAFEOPT:
        return safeopt_step(view), Stage.EXPANSION
    stage = Stage.EXPANSION if n <= T0 else Stage.MAXIMIZATION
    if method is Method.STAGEOPT:
        return stageopt_step(view, n, T0), stage
    return safectrlbo_step(view, n, T0), stage


# ---------------------------------------------------------------- swarm


def swarm_refine(
    objective: Callable[[np.ndarray], np.ndarray],
    safe_filter: Callable[[np.ndarray], np.ndarray],
    seeds: np.ndarray,
    domain: BoxDomain,
    rng: np.random.Generator,
    particles: int = 50,
    sweeps: int = 20,
    inertia: float = 0.7,
    cognitive: float = 1.5,
    social: float = 1.5,
) -> np.ndarray:
    """Particle-swarm ascent of ``objective`` restricted to ``safe_filter``.

    Particles start at the seeds (cycled, with small jitter after the first
    round).  Infeasible positions never become personal or global bests, so
    the result is either a feasible particle or the best seed.
    """
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    if seeds.shape[0] == 0:
        raise OptimizerError("swarm_refine needs at least one seed")
    seed_vals = np.asarray(objective(seeds), dtype=float)
    best_seed = seeds[int(np.argmax(seed_vals))].copy()
    g_best, g_val = best_seed, float(seed_vals.max())

    d = seeds.shape[1]
    width = domain.width
    pos = seeds[np.arange(particles) % seeds.shape[0]].copy()
    pos[seeds.shape[0] :] += rng.normal(0.0, 0.01, (max(particles - seeds.shape[0], 0), d)) * width
    pos = domain.clip(pos)
    vel = rng.normal(0.0, 0.05, (particles, d)) * width
    p_best = pos.copy()
    p_val = np.full(particles, -np.inf)

    for _ in range(sweeps + 1):
        ok = safe_filter(pos)
        vals = np.where(ok, objective(pos), -np.inf)
        improved = vals > p_val
        p_best[improved] = pos[improved]
        p_val[improved] = vals[improved]
        j = int(np.argmax(p_val))
        if p_val[j] > g_val:
            g_best, g_val = p_best[j].copy(), float(p_val[j])
        r1 = rng.random((particles, d))
        r2 = rng.random((particles, d))
        anchor = np.where(np.isfinite(p_val)[:, None], p_best, pos)
        vel = inertia * vel + cognitive * r1 * (anchor - pos) + social * r2 * (g_best - pos)
        pos = domain.clip(pos + vel)
    return g_best


# ---------------------------------------------------------------- candidates


class CandidatePool:
    """Candidate points, their tie-break keys, and one posterior cache per GP."""

    def __init__(self, domain: BoxDomain, cfg: CandidateConfig, seed: np.ndarray, rng: np.random.Generator):
        self.domain = domain
        self.cfg = cfg
        self.rng = rng
        self.grid = domain.dim <= cfg.grid_max_dim
        if self.grid:
            pts = np.vstack([seed[None, :], domain.grid(cfg.grid_resolution)])
        else:
            pts = np.vstack([seed[None, :], self._around(seed, cfg.pool_initial), domain.sample(rng, cfg.pool_uniform)])
        self.points = pts
        self.keys = rng.random(pts.shape[0])
        self.caches: list[PosteriorCache] = []

    def _around(self, x: np.ndarray, count: int) -> np.ndarray:
        d = self.domain.dim
        scales = np.asarray(self.cfg.pool_scales, dtype=float)
        s = scales[np.arange(count) % scales.size][:, None] * self.domain.width / np.sqrt(d)
        return self.domain.clip(x + self.rng.normal(size=(count, d)) * s)

    def attach(self, states: Sequence[GPState]):
        self.caches = [PosteriorCache(s, self.points) for s in states]

    def sync(self, states: Sequence[GPState]):
        for c, s in zip(self.caches, states):
            c.sync(s)

    def add(self, pts: np.ndarray):
        pts = np.atleast_2d(pts)
        if pts.shape[0] == 0:
            return
        self.points = np.vstack([self.points, pts])
        self.keys = np.concatenate([self.keys, self.rng.random(pts.shape[0])])
        for c in self.caches:
            c.add_candidates(pts)

    def grow(self, x: np.ndarray):
        if self.grid:
            return
        self.add(np.vstack([x[None, :], self._around(x, self.cfg.pool_per_iteration),
                            self.domain.sample(self.rng, self.cfg.pool_uniform)]))


# ---------------------------------------------------------------- campaign


def build_states(problem: Problem, config: OptimizerConfig, x0: np.ndarray, y0: np.ndarray) -> list[GPState]:
    if len(config.kernels) != problem.n_functions:
        raise OptimizerError(f"{len(config.kernels)} kernel configs for {problem.n_functions} functions")
    states = []
    for i, kc in enumerate(config.kernels):
        spec = kc.build(config.method, problem.domain.dim)
        mean = float(y0[i])
        if config.prior_mean == "threshold" and np.isfinite(problem.thresholds[i]):
            mean = float(problem.thresholds[i]) - config.prior_mean_offset * np.sqrt(spec.prior_variance())
        noise = config.model_noise_scale * float(problem.noise_std[i])
        s = GPState(spec, noise, prior_mean=mean, function_index=i)
        states.append(gp_update(s, (x0, y0[i]), config.refactor_every))
    return states


def _band(config: OptimizerConfig, n_constraints: int) -> np.ndarray:
    band = np.broadcast_to(np.asarray(config.boundary_band, dtype=float), (n_constraints,)).copy()
    if np.any(band <= 0):
        raise OptimizerError("boundary_band must be positive")
    return band


def make_view(pool: CandidatePool, problem: Problem, config: OptimizerConfig, beta: float) -> LoopView:
    cidx = problem.constraint_indices
    lowers = np.stack([pool.caches[i].bounds(beta).lower for i in cidx], axis=-1)
    margins = lowers - problem.thresholds[cidx]
    safe = np.all(margins >= 0.0, axis=-1)
    if config.force_seed_safe:
        safe[0] = True
    return LoopView(pool.caches, cidx, problem.thresholds, beta, safe, margins, pool.keys,
                    _band(config, cidx.size), config.expander_mode)


def _is_safe_truth(problem: Problem, values: np.ndarray) -> bool:
    c = problem.constraint_indices
    return bool(np.all(values[c] >= problem.thresholds[c]))


def run_campaign(
    problem: Problem,
    config: OptimizerConfig,
    rng: np.random.Generator | np.random.SeedSequence | int | None = None,
    on_record: Callable[[IterationRecord], None] | None = None,
) -> CampaignResult:
    """Seed evaluation followed by ``total_iterations`` acquisitions.

    The seed point, the observation noise and the optimizer's own draws
    come from three independent streams spawned from ``rng`` (default
    ``config.rng_seed``), so methods sharing a seed see the same start and
    the same noise sequence.
    """
    if isinstance(rng, np.random.Generator):
        seq = rng.bit_generator.seed_seq
    elif isinstance(rng, np.random.SeedSequence):
        seq = rng
    else:
        seq = np.random.SeedSequence(config.rng_seed if rng is None else int(rng))
    # built from the spawn key rather than seq.spawn(), which would advance
    # the counter and hand a reused sequence different streams
    seed_ss, noise_ss, algo_ss = (
        np.random.SeedSequence(seq.entropy, spawn_key=(*seq.spawn_key, k), pool_size=seq.pool_size) for k in range(3)
    )
    seed_rng, noise_rng, algo_rng = (np.random.default_rng(s) for s in (seed_ss, noise_ss, algo_ss))

    cidx = problem.constraint_indices
    h = problem.thresholds
    optimum = problem.optimum_value
    records: list[IterationRecord] = []
    best_val, best_x = -np.inf, None

    def result() -> CampaignResult:
        total = int(sum(int(np.sum(r.violation_flags)) for r in records))
        return CampaignResult(records, best_x, best_val, total, config.echo(), problem.name,
                              tuple(problem.function_names), tuple(int(c) for c in cidx),
                              records[0].chosen_point if records else None)

    def log(n, x, noisy, true, stage, t0, safe_count, trace=None):
        nonlocal best_val, best_x
        if _is_safe_truth(problem, true) and true[0] > best_val:
            best_val, best_x = float(true[0]), x.copy()
        regret = float(optimum - best_val) if optimum is not None else float("nan")
        rec = IterationRecord(n, x.copy(), noisy, true, stage, true[cidx] < h[cidx], regret, best_val,
                              (time.perf_counter() - t0) * 1e3, safe_count, trace)
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    t0 = time.perf_counter()
    try:
        x0 = problem.initial_point(seed_rng)
        true0 = problem.true_values(x0)
        noisy0 = true0 + noise_rng.normal(0.0, 1.0, true0.size) * problem.noise_std
        states = build_states(problem, config, x0, noisy0)
    except Exception as exc:
        raise CampaignAborted(f"seed evaluation failed: {exc}", result()) from exc
    log(0, x0, noisy0, true0, Stage.SEED, t0, 1)

    pool = CandidatePool(problem.domain, config.candidates, x0, algo_rng)
    pool.attach(states)
    T0 = config.stage_switch_T0
    for n in range(1, config.total_iterations + 1):
        t0 = time.perf_counter()
        try:
            beta = config.beta.at(n, states)
            view = make_view(pool, problem, config, beta)
            i, stage = select(config.method, view, n, T0)
            x = pool.points[i].copy()
            if config.candidates.swarm and stage is Stage.MAXIMIZATION:
                x = _swarm_ucb(x, view, states, problem, config, algo_rng)
            true = problem.true_values(x)
            noisy = true + noise_rng.normal(0.0, 1.0, true.size) * problem.noise_std
            states = [gp_update(s, (x, noisy[k]), config.refactor_every) for k, s in enumerate(states)]
        except Exception as exc:
            raise CampaignAborted(f"iteration {n}: {exc}", result()) from exc
        trace = None
        if config.trace_sets:
            trace = {
                "safe": np.flatnonzero(view.safe_mask),
                "boundary": np.flatnonzero(boundary_mask(view)),
                "n_candidates": int(view.safe_mask.size),
            }
        safe_count = int(view.safe_mask.sum())
        pool.sync(states)
        pool.grow(x)
        log(n, x, noisy, true, stage, t0, safe_count, trace)
    return result()


def _swarm_ucb(x_disc, view, states, problem, config, rng) -> np.ndarray:
    cidx = problem.constraint_indices
    h = problem.thresholds

    def ucb(P):
        m, v = posterior(states[0], P)
        return bounds_from_moments(m, v, view.beta).upper

    def safe(P):
        ok = np.ones(P.shape[0], dtype=bool)
        for i in cidx:
            m, v = posterior(states[i], P)
            ok &= bounds_from_moments(m, v, view.beta).lower >= h[i]
        return ok

    cc = config.candidates
    top = np.flatnonzero(view.safe_mask)
    order = np.argsort(-ucb(view.perf.C[top]))[:10]
    seeds = np.vstack([x_disc[None, :], view.perf.C[top[order]]])
    return swarm_refine(ucb, safe, seeds, problem.domain, rng, cc.swarm_particles, cc.swarm_sweeps,
                        cc.swarm_inertia, cc.swarm_cognitive, cc.swarm_social)


def spawn_seeds(master_seed: int, reps: int) -> list[np.random.SeedSequence]:
    """Per-repetition streams; repetition ``r`` is identical across methods."""
    return np.random.SeedSequence(master_seed).spawn(reps)


def run_repetitions(
    problem: Problem,
    config: OptimizerConfig,
    master_seed: int,
    reps: int,
    on_result: Callable[[int, CampaignResult], None] | None = None,
) -> list[CampaignResult]:
    results = []
    for r, ss in enumerate(spawn_seeds(master_seed, reps)):
        res = run_campaign(problem, config, ss)
        results.append(res)
        if on_result is not None:
            on_result(r, res)
    return results


def with_method(config: OptimizerConfig, method: Method | str) -> OptimizerConfig:
    return replace(config, method=Method(method))
