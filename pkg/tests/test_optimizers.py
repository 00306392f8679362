import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safectrl.kernels import KernelKind
from safectrl.optimizers import (
    BetaMode,
    CampaignAborted,
    CandidateConfig,
    KernelConfig,
    Method,
    OptimizerConfig,
    OptimizerError,
    Stage,
    build_states,
    run_campaign,
    run_repetitions,
    spawn_seeds,
    swarm_refine,
    with_method,
)
from safectrl.problem import Problem, ProblemError, from_benchmark
from safectrl.benchmarks import HARTMANN6D
from safectrl.safe_sets import BoxDomain

DOMAIN_1D = BoxDomain([-4.0], [4.0])
GRID_1D = CandidateConfig(grid_resolution=201)


def _wave(x):
    x = np.atleast_1d(x)
    return np.array([float(np.cos(0.8 * x[0]) + 0.3 * np.sin(2.3 * x[0] + 0.4) + 0.05)])


def _problem(noise=0.01, func=_wave):
    return Problem("wave", DOMAIN_1D, func, np.array([0.0]), np.array([noise]),
                   optimum_value=1.3, seed_point=np.array([0.0]))


def _config(method="safectrlbo", iters=20, T0=10, **kw):
    kw.setdefault("candidates", GRID_1D)
    return OptimizerConfig(Method(method), iters, T0, (KernelConfig((0.6,), 1.0),), **kw)


def _grid_points(seed):
    return np.vstack([seed[None, :], DOMAIN_1D.grid(201)])


def test_first_query_is_on_the_boundary_not_the_seed():
    res = run_campaign(_problem(), _config(iters=1, T0=1, trace_sets=True), 0)
    x1 = res.records[1].chosen_point
    assert abs(x1[0]) > 0.1
    pts = _grid_points(res.seed_point)
    tr = res.records[1].trace
    assert np.any(np.all(pts[tr["boundary"]] == x1, axis=1))
    safe = pts[tr["safe"], 0]
    assert x1[0] in (safe.min(), safe.max())


@pytest.mark.parametrize("method", list(Method))
def test_every_query_is_certified_safe(method):
    res = run_campaign(_problem(), _config(method, iters=25, trace_sets=True), 1)
    pts = _grid_points(res.seed_point)
    for rec in res.records[1:]:
        assert np.any(np.all(pts[rec.trace["safe"]] == rec.chosen_point, axis=1))
    assert res.total_violations == 0


@pytest.mark.parametrize("method", list(Method))
def test_campaign_is_deterministic(method):
    a = run_campaign(_problem(), _config(method, iters=12), 5)
    b = run_campaign(_problem(), _config(method, iters=12), 5)
    np.testing.assert_array_equal([r.chosen_point for r in a.records], [r.chosen_point for r in b.records])
    np.testing.assert_array_equal([r.noisy_values for r in a.records], [r.noisy_values for r in b.records])


def test_noise_free_single_iteration():
    res = run_campaign(_problem(noise=0.0), _config(iters=1, T0=1), 0)
    assert len(res.records) == 2
    seed = res.records[0]
    np.testing.assert_array_equal(seed.noisy_values, seed.true_values)
    assert seed.stage is Stage.SEED
    assert seed.simple_regret == pytest.approx(1.3 - _wave(0.0)[0])


def test_regret_is_nonincreasing_and_stages_switch():
    res = run_campaign(_problem(), _config(iters=20, T0=8), 2)
    r = res.regret_series()
    assert np.all(np.diff(r) <= 0)
    stages = [rec.stage for rec in res.records[1:]]
    assert stages == [Stage.EXPANSION] * 8 + [Stage.MAXIMIZATION] * 12
    assert res.best_value == pytest.approx(1.3 - r[-1])


def test_safeopt_and_stageopt_agree_on_first_query():
    a = run_campaign(_problem(), _config("safeopt", iters=1), 3)
    b = run_campaign(_problem(), _config("stageopt", iters=1, T0=1), 3)
    np.testing.assert_array_equal(a.records[1].chosen_point, b.records[1].chosen_point)


def test_methods_share_seed_and_noise_per_repetition():
    runs = {m: run_repetitions(_problem(), _config(m, iters=3, T0=2), 9, 3) for m in ("safectrlbo", "safeopt")}
    for ra, rb in zip(runs["safectrlbo"], runs["safeopt"]):
        np.testing.assert_array_equal(ra.seed_point, rb.seed_point)
        np.testing.assert_array_equal(ra.records[0].noisy_values, rb.records[0].noisy_values)


def test_spawned_seeds_are_distinct_and_reproducible():
    a = [s.generate_state(2) for s in spawn_seeds(4, 5)]
    b = [s.generate_state(2) for s in spawn_seeds(4, 5)]
    np.testing.assert_array_equal(a, b)
    assert len({tuple(s) for s in a}) == 5


def test_method_picks_kernel_kind():
    p = _problem()
    x0, y0 = np.array([0.0]), _wave(0.0)
    assert build_states(p, _config("safectrlbo"), x0, y0)[0].kernel.kind is KernelKind.ADDITIVE
    for m in ("safeopt", "stageopt", "ablation"):
        assert build_states(p, _config(m), x0, y0)[0].kernel.kind is KernelKind.FULL_RBF


def test_threshold_prior_mean():
    p = _problem()
    cfg = _config(prior_mean="threshold", prior_mean_offset=0.5)
    s = build_states(p, cfg, np.array([0.0]), _wave(0.0))[0]
    assert s.prior_mean == pytest.approx(-0.5)
    assert build_states(p, _config(), np.array([0.0]), _wave(0.0))[0].prior_mean == pytest.approx(_wave(0.0)[0])


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(iters=-1),
        dict(iters=10, T0=0),
        dict(iters=10, T0=11),
        dict(prior_mean="zero"),
        dict(expander_mode="some"),
        dict(model_noise_scale=0.0),
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(OptimizerError):
        _config(**kwargs)


def test_config_requires_one_kernel_per_function():
    cfg = OptimizerConfig(Method.SAFEOPT, 5, 2, (KernelConfig((0.6,)), KernelConfig((0.6,))), candidates=GRID_1D)
    with pytest.raises(CampaignAborted):
        run_campaign(_problem(), cfg, 0)


def test_beta_mode_validation():
    with pytest.raises(OptimizerError):
        BetaMode(kind="adaptive")
    with pytest.raises(OptimizerError):
        BetaMode(value=0.0)


def test_failing_evaluator_aborts_with_partial_records():
    calls = {"n": 0}

    def flaky(x):
        calls["n"] += 1
        if calls["n"] > 3:
            raise RuntimeError("rig offline")
        return _wave(x)

    with pytest.raises(CampaignAborted) as exc:
        run_campaign(_problem(func=flaky), _config(iters=10), 0)
    assert "iteration 3" in str(exc.value)
    assert len(exc.value.partial.records) == 3


def test_problem_validation():
    with pytest.raises(ProblemError):
        Problem("p", DOMAIN_1D, _wave, np.array([np.inf]), np.array([0.1]), seed_point=np.zeros(1))
    with pytest.raises(ProblemError):
        Problem("p", DOMAIN_1D, _wave, np.array([0.0]), np.array([0.1]))


def test_with_method_keeps_everything_else():
    cfg = _config(boundary_band=0.2)
    other = with_method(cfg, "stageopt")
    assert other.method is Method.STAGEOPT and other.boundary_band == 0.2


def test_pool_grows_in_high_dimension():
    cfg = OptimizerConfig(
        Method.SAFECTRLBO, 3, 2, (KernelConfig((0.25,), 1.0),),
        candidates=CandidateConfig(pool_initial=50, pool_per_iteration=10, pool_uniform=5),
        trace_sets=True,
    )
    res = run_campaign(from_benchmark(HARTMANN6D), cfg, 0)
    sizes = [r.trace["n_candidates"] for r in res.records[1:]]
    assert sizes == [56, 72, 88]
    assert res.total_violations == 0


def test_swarm_on_constant_objective_returns_first_seed():
    seeds = np.array([[0.2, 0.3], [0.5, 0.5]])
    dom = BoxDomain([0.0, 0.0], [1.0, 1.0])
    x = swarm_refine(lambda P: np.zeros(len(P)), lambda P: np.ones(len(P), bool), seeds, dom,
                     np.random.default_rng(0))
    np.testing.assert_array_equal(x, seeds[0])


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_swarm_result_is_feasible_and_no_worse_than_seeds(seed):
    rng = np.random.default_rng(seed)
    dom = BoxDomain([-1.0, -1.0], [1.0, 1.0])
    target = rng.uniform(-1, 1, 2)

    def obj(P):
        return -np.sum((np.atleast_2d(P) - target) ** 2, axis=1)

    def feasible(P):
        return np.atleast_2d(P)[:, 0] <= 0.5

    seeds = np.array([[-0.5, 0.0], [0.0, 0.5]])
    x = swarm_refine(obj, feasible, seeds, dom, rng, particles=20, sweeps=10)
    assert feasible(x)[0] and dom.contains(x)
    assert obj(x)[0] >= obj(seeds).max()


def test_swarm_needs_a_seed():
    with pytest.raises(OptimizerError):
        swarm_refine(lambda P: P[:, 0], lambda P: np.ones(len(P), bool), np.empty((0, 2)),
                     BoxDomain([0.0, 0.0], [1.0, 1.0]), np.random.default_rng(0))


def test_swarm_campaign_stays_safe():
    cfg = _config(iters=15, T0=5, candidates=CandidateConfig(grid_resolution=201, swarm=True, swarm_sweeps=5))
    res = run_campaign(_problem(), cfg, 0)
    assert res.total_violations == 0
    assert res.best_value > _wave(0.0)[0]


def test_swarm_converges_to_quadratic_argmax():
    dom = BoxDomain([-1.0, -1.0], [1.0, 1.0])
    peak = np.array([0.31, -0.42])
    x = swarm_refine(lambda P: -np.sum((np.atleast_2d(P) - peak) ** 2, axis=1),
                     lambda P: np.ones(len(np.atleast_2d(P)), bool),
                     np.array([[0.8, 0.8], [-0.8, 0.5]]), dom, np.random.default_rng(1), sweeps=60)
    assert np.linalg.norm(x - peak) <= 1e-3


def test_reused_seed_sequence_gives_same_campaign():
    ss = spawn_seeds(2, 1)[0]
    a = run_campaign(_problem(), _config(iters=4, T0=2), ss)
    b = run_campaign(_problem(), _config("safeopt", iters=4, T0=2), ss)
    c = run_campaign(_problem(), _config(iters=4, T0=2), ss)
    np.testing.assert_array_equal(a.records[0].noisy_values, b.records[0].noisy_values)
    np.testing.assert_array_equal([r.chosen_point for r in a.records], [r.chosen_point for r in c.records])
