import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safectrl.gp import ConfidenceBounds, GPState, PosteriorCache, confidence_bounds, gp_update
from safectrl.kernels import KernelSpec
from safectrl.safe_sets import (
    BoxDomain,
    CandidateSet,
    EmptySafeSetError,
    SafeSetError,
    SafeSetSnapshot,
    compute_boundary_set,
    compute_expander_set,
    compute_maximizer_set,
    compute_safe_set,
    constraint_margins,
    first_expander,
    hypothetical_lower,
    hypothetical_lower_block,
    is_expander,
    masked_argmax,
    outermost_region,
)
from safectrl.verify import boundary_variance_rate


def _bounds(lower, upper=None):
    lower = np.asarray(lower, dtype=float)
    upper = lower + 1.0 if upper is None else np.asarray(upper, dtype=float)
    return ConfidenceBounds(lower, upper, 2.0)


def _seeded_1d(seed_value=1.0, ls=0.5, noise=0.01, n=201):
    kernel = KernelSpec.full_rbf([ls], 1.0)
    state = gp_update(GPState(kernel, noise), ([0.0], seed_value))
    C = np.linspace(-3, 3, n)[:, None]
    return state, PosteriorCache(state, C), C


def test_domain_validation():
    with pytest.raises(SafeSetError):
        BoxDomain([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(SafeSetError):
        CandidateSet(np.empty((0, 2)))


def test_domain_grid_and_sampling():
    dom = BoxDomain([-1.0, 0.0], [1.0, 2.0])
    g = dom.grid((3, 5))
    assert g.shape == (15, 2)
    assert dom.contains(g).all()
    s = dom.sample(np.random.default_rng(0), 100)
    assert dom.contains(s).all()
    assert not dom.contains([1.5, 1.0])


def test_margins_shape_and_mismatch():
    m = constraint_margins([_bounds([0.1, -0.2]), _bounds([0.5, 0.4])], [0.0, 0.3])
    np.testing.assert_allclose(m, [[0.1, 0.2], [-0.2, 0.1]])
    with pytest.raises(SafeSetError):
        constraint_margins([_bounds([0.0])], [0.0, 1.0])


def test_all_above_threshold_is_all_safe():
    assert compute_safe_set([_bounds([0.5, 1.0, 2.0])], [0.0]).all()


def test_prior_has_no_safe_points():
    kernel = KernelSpec.full_rbf([1.0], 1.0)
    b = confidence_bounds(GPState(kernel, 0.1), np.linspace(-1, 1, 11)[:, None], 2.0)
    assert not compute_safe_set([b], [0.0]).any()


def test_every_constraint_must_hold():
    safe = compute_safe_set([_bounds([1.0, 1.0, -1.0]), _bounds([1.0, -0.1, 1.0])], [0.0, 0.0])
    np.testing.assert_array_equal(safe, [True, False, False])


def test_one_seed_gives_contiguous_interval():
    _, cache, _ = _seeded_1d()
    safe = compute_safe_set([cache.bounds(2.0)], [0.0])
    idx = np.flatnonzero(safe)
    assert idx.size > 1
    np.testing.assert_array_equal(idx, np.arange(idx[0], idx[-1] + 1))


def test_boundary_fallback_takes_smallest_margins():
    margins = np.array([5.0, 1.0, 3.0, 2.0, 4.0, -1.0])
    safe = margins >= 0
    mask = compute_boundary_set(margins, safe, 0.05, fallback_count=3)
    np.testing.assert_array_equal(np.flatnonzero(mask), [1, 2, 3])


def test_boundary_exact_zero_margins():
    margins = np.array([0.0, 0.7, 0.0, 0.9, -0.3])
    mask = compute_boundary_set(margins, margins >= 0, 1e-9)
    np.testing.assert_array_equal(np.flatnonzero(mask), [0, 2])


def test_boundary_uses_per_constraint_band():
    margins = np.array([[0.3, 5.0], [5.0, 0.3], [5.0, 5.0]])
    mask = compute_boundary_set(margins, np.ones(3, bool), [0.5, 0.1], fallback_count=0)
    np.testing.assert_array_equal(mask, [True, False, False])


def test_boundary_rejects_nonpositive_band():
    with pytest.raises(SafeSetError):
        compute_boundary_set(np.ones(3), np.ones(3, bool), 0.0)


def test_seed_boundary_contains_extreme_safe_points():
    _, cache, C = _seeded_1d()
    lower = cache.bounds(2.0).lower
    safe = lower >= 0
    mask = compute_boundary_set(lower, safe, 0.1)
    idx = np.flatnonzero(safe)
    assert mask[idx[0]] and mask[idx[-1]]
    best = masked_argmax(cache.std, mask)
    assert best in (idx[0], idx[-1])


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_snapshot_masks_are_subsets(seed):
    rng = np.random.default_rng(seed)
    margins = rng.normal(size=(60, 2))
    safe = np.all(margins >= 0, axis=1)
    snap = SafeSetSnapshot(safe, compute_boundary_set(margins, safe, 0.3), margins)
    snap.check()
    np.testing.assert_array_equal(snap.safe_mask, margins.min(1) >= 0)


def test_snapshot_check_catches_leak():
    safe = np.array([True, False])
    with pytest.raises(SafeSetError):
        SafeSetSnapshot(safe, np.array([False, True]), np.zeros((2, 1))).check()


def test_hypothetical_lower_matches_refit():
    state, cache, C = _seeded_1d()
    safe = cache.bounds(2.0).lower >= 0
    i = int(np.flatnonzero(safe)[-1])
    targets = np.arange(C.shape[0])
    u = cache.mean[i] + 2.0 * cache.std[i]
    refit = confidence_bounds(gp_update(state, (C[i], u)), C, 2.0).lower
    np.testing.assert_allclose(hypothetical_lower(cache, i, targets, 2.0), refit, atol=1e-9)
    block = hypothetical_lower_block(cache, np.array([i, i - 3]), targets, 2.0)
    np.testing.assert_allclose(block[0], refit, atol=1e-9)
    # the real state is untouched
    assert cache.state.n == 1


def test_no_unsafe_candidates_means_no_expanders():
    _, cache, _ = _seeded_1d()
    safe = np.ones(cache.C.shape[0], bool)
    assert not compute_expander_set([cache], safe, 2.0, [-100.0]).any()


def test_seed_expanders_are_outermost():
    _, cache, _ = _seeded_1d()
    safe = cache.bounds(2.0).lower >= 0
    e = compute_expander_set([cache], safe, 2.0, [0.0])
    assert e.any()
    idx = np.flatnonzero(safe)
    assert masked_argmax(cache.std, e) in (idx[0], idx[-1])


def test_interior_point_with_tiny_variance_is_not_expander():
    kernel = KernelSpec.full_rbf([0.5], 1.0)
    state = GPState(kernel, 0.01)
    for _ in range(30):
        state = gp_update(state, ([0.0], 1.0))
    for x in (-0.6, 0.6):
        state = gp_update(state, ([x], 0.8))
    C = np.linspace(-3, 3, 301)[:, None]
    cache = PosteriorCache(state, C)
    safe = cache.bounds(2.0).lower >= 0
    centre = int(np.argmin(np.abs(C[:, 0])))
    assert safe[centre]
    assert not is_expander([cache], centre, np.flatnonzero(~safe), 2.0, [0.0])


def test_first_expander_agrees_with_full_mask():
    _, cache, _ = _seeded_1d()
    safe = cache.bounds(2.0).lower >= 0
    full = compute_expander_set([cache], safe, 2.0, [0.0])
    order = np.flatnonzero(safe)[::-1]
    first = first_expander([cache], order, np.flatnonzero(~safe), 2.0, [0.0], block=4)
    assert first == order[np.argmax(full[order])]


def test_expander_mode_validation():
    _, cache, _ = _seeded_1d()
    safe = cache.bounds(2.0).lower >= 0
    with pytest.raises(SafeSetError):
        is_expander([cache], 100, np.flatnonzero(~safe), 2.0, [0.0], mode="some")


def test_single_safe_point_is_maximizer():
    b = _bounds([-1.0, 0.2, -3.0], [0.0, 0.5, 1.0])
    safe = np.array([False, True, False])
    np.testing.assert_array_equal(compute_maximizer_set(b, safe), safe)


def test_maximizer_excludes_low_upper_bound():
    b = _bounds([1.0, 0.0, 0.5], [2.0, 0.9, 1.1])
    np.testing.assert_array_equal(compute_maximizer_set(b, np.ones(3, bool)), [True, False, True])


def test_maximizer_of_empty_safe_set():
    with pytest.raises(EmptySafeSetError):
        compute_maximizer_set(_bounds([0.0]), np.array([False]))


@given(seed=st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_maximizer_matches_definition(seed):
    rng = np.random.default_rng(seed)
    kernel = KernelSpec.full_rbf([0.4, 0.4], 1.0)
    state = GPState(kernel, 0.1)
    for x in rng.uniform(-1, 1, (8, 2)):
        state = gp_update(state, (x, float(np.sin(3 * x).sum())))
    C = rng.uniform(-1, 1, (50, 2))
    b = confidence_bounds(state, C, 2.0)
    safe = rng.random(50) < 0.6
    safe[0] = True
    best_l = max(b.lower[i] for i in range(50) if safe[i])
    expected = np.array([safe[i] and b.upper[i] >= best_l for i in range(50)])
    np.testing.assert_array_equal(compute_maximizer_set(b, safe), expected)


def test_masked_argmax_tiebreak():
    vals = np.array([1.0, 3.0, 3.0, 3.0])
    mask = np.array([True, True, True, False])
    assert masked_argmax(vals, mask) == 1
    assert masked_argmax(vals, mask, np.array([0.0, 0.9, 0.1, 0.0])) == 2
    with pytest.raises(EmptySafeSetError):
        masked_argmax(vals, np.zeros(4, bool))


def test_outermost_region_segments():
    pts, lam = outermost_region(np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([[0.0, 0.0], [0.0, 1.0]]), steps=5)
    assert pts.shape == (10, 2)
    np.testing.assert_allclose(pts[lam == 0.0], [[0.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(pts[lam == 1.0], [[1.0, 0.0], [0.0, 2.0]])
    with pytest.raises(SafeSetError):
        outermost_region(np.empty((0, 2)), np.zeros((1, 2)))


def test_safe_set_is_stable_under_true_observations():
    # observing the true function rarely revokes safety
    rng = np.random.default_rng(11)
    kernel = KernelSpec.full_rbf([0.5], 1.0)
    C = np.linspace(-3, 3, 121)[:, None]
    K = kernel(C, C) + 1e-9 * np.eye(121)
    Lk = np.linalg.cholesky(K)
    ratios = []
    for _ in range(200):
        f = Lk @ rng.normal(size=121) * 0.5
        f += 1.0 - f[60]
        state = gp_update(GPState(kernel, 0.05), (C[60], f[60] + 0.05 * rng.normal()))
        cache = PosteriorCache(state, C)
        safe = cache.bounds(2.0).lower >= 0
        for _ in range(5):
            i = masked_argmax(cache.std, compute_boundary_set(cache.bounds(2.0).lower, safe, 0.1))
            state = gp_update(state, (C[i], f[i] + 0.05 * rng.normal()))
            cache.sync(state)
            new_safe = cache.bounds(2.0).lower >= 0
            ratios.append(np.sum(new_safe & safe) / np.sum(safe))
            safe = new_safe
    assert np.mean(ratios) >= 0.99


@pytest.mark.parametrize("dim", [1, 2])
def test_variance_argmax_on_boundary(dim):
    rate, large = boundary_variance_rate(dim, trials=100)
    assert large > 0
    assert rate >= 0.95
