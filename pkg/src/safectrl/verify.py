"""Property checks behind ``safectrl verify``.

Each check returns a :class:`CheckResult`; :func:`run_checks` runs the
checks of the selected modules and collects them into a table.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import comb

from . import benchmarks as bm
from .control_sim import ControllerGains, tuning_problem
from .gp import GPState, PosteriorCache, gp_update, posterior, refactorize
from .kernels import (
    KernelSpec,
    additive_order_kernel_bruteforce,
    gram_matrix,
    lipschitz_bound,
    newton_girard,
)
from .optimizers import LoopView, boundary_mask, expander_mask
from .safe_sets import BoxDomain, masked_argmax, outermost_region

MODULES = ("kernels", "gp", "safe_sets", "optimizers", "benchmarks", "control_sim")


@dataclass(frozen=True)
class CheckResult:
    module: str
    name: str
    passed: bool
    detail: str


# ---------------------------------------------------------------- kernels


def newton_girard_agreement(n_pairs: int = 1000, max_dim: int = 8, seed: int = 0) -> tuple[float, float]:
    """Worst errors of the recursion against subset enumeration.

    Returns ``(total_rel, order_scaled)``: the relative error of the
    all-orders sum, and the per-order error scaled by ``C(d, n) max(z)^n``,
    the size of the terms whose cancellation produces ``e_n``.
    """
    rng = np.random.default_rng(seed)
    worst_total = worst_order = 0.0
    for p in range(n_pairs):
        d = 1 + p % max_dim
        base_ls = rng.uniform(0.2, 2.0, d)
        base_var = rng.uniform(0.3, 1.5, d)
        spec = KernelSpec.additive(base_ls, base_var)
        a, b = rng.uniform(-1, 1, (2, d))
        z = spec.base_values(a[None], b[None])[0, 0]
        e = newton_girard(z, d)
        brute = np.array([additive_order_kernel_bruteforce(a, b, n, spec.base) for n in range(1, d + 1)])
        zmax = z.max()
        scale = np.array([comb(d, n) * zmax**n for n in range(1, d + 1)])
        worst_order = max(worst_order, float(np.max(np.abs(e[1:] - brute) / scale)))
        worst_total = max(worst_total, abs(e[1:].sum() - brute.sum()) / abs(brute.sum()))
    return worst_total, worst_order


def gram_psd_worst(n_sets: int = 40, seed: int = 1) -> float:
    """Most negative ``lambda_min / lambda_max`` over random Gram matrices."""
    rng = np.random.default_rng(seed)
    worst = np.inf
    for t in range(n_sets):
        d = 1 + t % 6
        n = int(rng.integers(2, 65))
        X = rng.uniform(-1, 1, (n, d))
        if t % 2:
            spec = KernelSpec.full_rbf(rng.uniform(0.2, 1.0, d), rng.uniform(0.5, 2.0))
        else:
            spec = KernelSpec.additive(rng.uniform(0.2, 1.0, d), rng.uniform(0.5, 1.5, d))
        ev = np.linalg.eigvalsh(gram_matrix(X, spec))
        worst = min(worst, ev[0] / ev[-1])
    return float(worst)


def lipschitz_worst_ratio(spec: KernelSpec, n_pairs: int = 10_000, seed: int = 2) -> float:
    """Largest ``|k(x,z) - k(y,z)| / (L |x - y|)`` over sampled triples."""
    rng = np.random.default_rng(seed)
    d = spec.dim
    L = lipschitz_bound(spec)
    x = rng.uniform(-2, 2, (n_pairs, d))
    # half the pairs are close, where the slope is largest
    step = rng.normal(size=(n_pairs, d)) * np.where(np.arange(n_pairs) % 2, 1.0, 1e-3)[:, None]
    y = x + step
    zc = rng.uniform(-2, 2, (n_pairs, d))
    kx = np.array([spec(x[i : i + 1], zc[i : i + 1])[0, 0] for i in range(n_pairs)])
    ky = np.array([spec(y[i : i + 1], zc[i : i + 1])[0, 0] for i in range(n_pairs)])
    return float(np.max(np.abs(kx - ky) / (L * np.linalg.norm(x - y, axis=1))))


def _kernel_checks() -> list[CheckResult]:
    total, order = newton_girard_agreement()
    out = [
        CheckResult("kernels", "newton_girard_vs_enumeration", total <= 1e-10 and order <= 1e-10,
                    f"total rel err {total:.2e}, per-order scaled err {order:.2e}"),
    ]
    psd = gram_psd_worst()
    out.append(CheckResult("kernels", "gram_psd", psd >= -1e-9, f"min eig ratio {psd:.2e}"))
    worst = 0.0
    for d in (1, 2, 4, 6):
        for spec in (KernelSpec.additive(np.linspace(0.3, 1.2, d)),
                     KernelSpec.additive(np.full(d, 1.0), max_order=1),
                     KernelSpec.full_rbf(np.linspace(0.4, 1.0, d))):
            worst = max(worst, lipschitz_worst_ratio(spec, 2500))
    out.append(CheckResult("kernels", "lipschitz_bound", worst <= 1.0, f"max slope / bound = {worst:.4f}"))
    return out


# ---------------------------------------------------------------- gp


def dense_posterior(kernel: KernelSpec, X, y, noise_std: float, prior_mean: float, Q):
    """Posterior by explicit matrix inversion of ``K + (s^2 + jitter) I``."""
    jitter = 1e-8 * kernel.prior_variance()
    K = kernel(X, X) + (noise_std**2 + jitter) * np.eye(len(X))
    Kinv = np.linalg.inv(K)
    kq = kernel(X, Q)
    mean = prior_mean + kq.T @ Kinv @ (y - prior_mean)
    var = kernel.prior_variance() - np.einsum("ij,ik,kj->j", kq, Kinv, kq)
    return mean, var


def gp_oracle_errors(n_trials: int = 12, seed: int = 3) -> tuple[float, float]:
    """Worst relative mean / variance errors of the incremental GP vs the dense oracle."""
    rng = np.random.default_rng(seed)
    worst_m = worst_v = 0.0
    for t in range(n_trials):
        d = 1 + t % 4
        n = int(rng.integers(1, 129))
        kernel = (KernelSpec.additive(rng.uniform(0.4, 1.0, d), total_variance=1.5) if t % 2
                  else KernelSpec.full_rbf(rng.uniform(0.4, 1.0, d), 1.5))
        noise = 0.1
        X = rng.uniform(-1, 1, (n, d))
        y = np.sin(3 * X).sum(axis=1) + noise * rng.normal(size=n)
        s = GPState(kernel, noise, prior_mean=0.2)
        for xi, yi in zip(X, y):
            s = gp_update(s, (xi, yi))
        Q = rng.uniform(-1, 1, (64, d))
        m, v = posterior(s, Q)
        m_ref, v_ref = dense_posterior(kernel, X, y, noise, 0.2, Q)
        worst_m = max(worst_m, float(np.max(np.abs(m - m_ref) / np.maximum(np.abs(m_ref), 1e-12))))
        worst_v = max(worst_v, float(np.max(np.abs(v - v_ref) / np.maximum(np.abs(v_ref), 1e-12))))
    return worst_m, worst_v


def _gp_checks() -> list[CheckResult]:
    m, v = gp_oracle_errors()
    out = [CheckResult("gp", "posterior_vs_dense_inverse", m <= 1e-8 and v <= 1e-8,
                       f"mean rel err {m:.2e}, var rel err {v:.2e}")]
    rng = np.random.default_rng(4)
    kernel = KernelSpec.full_rbf([0.5, 0.5], 1.0)
    X = rng.uniform(-1, 1, (70, 2))
    y = np.cos(X).sum(1)
    s = GPState(kernel, 0.05)
    for xi, yi in zip(X, y):
        s = gp_update(s, (xi, yi))
    ref = refactorize(s, X, y)
    err = float(np.max(np.abs(s.chol - ref.chol)))
    out.append(CheckResult("gp", "incremental_vs_batch_factor", err <= 1e-9, f"max factor diff {err:.2e}"))
    C = rng.uniform(-1, 1, (200, 2))
    cache = PosteriorCache(GPState(kernel, 0.05), C)
    s = GPState(kernel, 0.05)
    for xi, yi in zip(X, y):
        s = gp_update(s, (xi, yi))
        cache.sync(s)
    m_ref, v_ref = posterior(s, C)
    err = float(max(np.max(np.abs(cache.mean - m_ref)), np.max(np.abs(cache.var - v_ref))))
    out.append(CheckResult("gp", "candidate_cache_vs_direct", err <= 1e-9, f"max diff {err:.2e}"))
    return out


# ---------------------------------------------------------------- safe sets / acquisition


def _fixture_1d(x):
    x = np.asarray(x, dtype=float)[..., 0]
    return np.cos(0.8 * x) + 0.3 * np.sin(2.3 * x + 0.4) + 0.05


def _fixture_2d(x):
    x = np.asarray(x, dtype=float)
    return 1.1 * np.exp(-0.35 * (x[..., 0] ** 2 + 1.6 * x[..., 1] ** 2)) + 0.15 * np.sin(2 * x[..., 0]) - 0.35


@dataclass(frozen=True)
class AcquisitionFixture:
    dim: int
    func: Callable
    domain: BoxDomain
    resolution: int
    seed_point: np.ndarray
    lengthscale: float = 0.6
    variance: float = 1.0
    noise_std: float = 0.01
    beta: float = 2.0
    band: float = 0.1


FIXTURES = {
    1: AcquisitionFixture(1, _fixture_1d, BoxDomain([-4.0], [4.0]), 401, np.array([0.0])),
    2: AcquisitionFixture(2, _fixture_2d, BoxDomain([-3.0, -3.0], [3.0, 3.0]), 61, np.array([0.0, 0.0])),
}


def acquisition_equivalence(dim: int, iterations: int = 10, seed: int = 5) -> list[tuple[int, int]]:
    """``(boundary_choice, expander_choice)`` candidate indices per iteration.

    Both argmaxes are taken on the same posterior; the trajectory follows the
    boundary choice.  Observation noise is drawn from ``seed``.
    """
    fx = FIXTURES[dim]
    rng = np.random.default_rng(seed)
    C = fx.domain.grid(fx.resolution)
    keys = rng.random(C.shape[0])
    kernel = KernelSpec.full_rbf(np.full(dim, fx.lengthscale), fx.variance)
    state = GPState(kernel, fx.noise_std, prior_mean=0.0)
    x = fx.seed_point
    state = gp_update(state, (x, float(fx.func(x)) + fx.noise_std * rng.normal()))
    cache = PosteriorCache(state, C)
    pairs = []
    h = np.array([0.0])
    for _ in range(iterations):
        lower = cache.bounds(fx.beta).lower
        safe = lower >= 0.0
        view = LoopView([cache], np.array([0]), h, fx.beta, safe, (lower - 0.0)[:, None], keys, np.array([fx.band]))
        b = masked_argmax(cache.std, boundary_mask(view), keys)
        e_mask = expander_mask(view)
        e = masked_argmax(cache.std, e_mask, keys) if e_mask.any() else -1
        pairs.append((b, e))
        x = C[b]
        state = gp_update(state, (x, float(fx.func(x)) + fx.noise_std * rng.normal()))
        cache.sync(state)
    return pairs


def boundary_variance_trial(dim: int, rng: np.random.Generator, steps: int = 41) -> tuple[bool, bool]:
    """One clustered-seed posterior; returns ``(argmax_in_boundary, region_large)``.

    A handful of observations cluster around a random centre.  Within the
    outermost region (segments from boundary candidates to their nearest
    evaluated point) the variance maximizer is located and tested against
    the boundary band.  ``region_large`` reports whether the segments are
    long compared with the cluster spread.
    """
    domain = BoxDomain(np.full(dim, -3.0), np.full(dim, 3.0))
    C = domain.grid(401 if dim == 1 else 61)
    centre = rng.uniform(-1.0, 1.0, dim)
    k = int(rng.integers(2, 6))
    X = centre + rng.normal(0.0, 0.08, (k, dim))
    y = rng.uniform(1.0, 1.6, k)
    kernel = KernelSpec.full_rbf(np.full(dim, rng.uniform(0.4, 0.8)), 1.0)
    s = GPState(kernel, 0.01, prior_mean=0.0)
    for xi, yi in zip(X, y):
        s = gp_update(s, (xi, yi))
    beta, band = 2.0, 0.05
    m, v = posterior(s, C)
    lower = m - beta * np.sqrt(v)
    safe = lower >= 0.0
    view = LoopView([], np.array([0]), np.array([0.0]), beta, safe, lower[:, None], np.zeros(C.shape[0]), np.array([band]))
    bmask = boundary_mask(view)
    pts, lam = outermost_region(C[bmask], X, steps)
    _, v_o = posterior(s, pts)
    j = int(np.argmax(v_o))
    m_j, v_j = posterior(s, pts[j : j + 1])
    margin = float(m_j[0] - beta * np.sqrt(v_j[0]))
    # B_n membership covers the smallest-margin fallback used on coarse grids
    is_member = bool(np.any(np.all(pts[j] == C[bmask], axis=1)))
    in_band = is_member or margin <= band + 1e-12
    spread = float(np.max(np.linalg.norm(X - X.mean(0), axis=1)))
    seg_len = float(np.median(np.linalg.norm(pts[lam == 1.0] - pts[lam == 0.0], axis=1)))
    return in_band, seg_len > 3 * spread


def boundary_variance_rate(dim: int, trials: int = 100, seed: int = 6) -> tuple[float, int]:
    """Fraction of large-region trials whose variance argmax sits in the band."""
    rng = np.random.default_rng(seed + dim)
    hits = large = 0
    for _ in range(trials):
        in_band, is_large = boundary_variance_trial(dim, rng)
        if is_large:
            large += 1
            hits += in_band
    return (hits / large if large else float("nan")), large


def _safe_set_checks() -> list[CheckResult]:
    out = []
    for d in (1, 2):
        rate, large = boundary_variance_rate(d)
        out.append(CheckResult("safe_sets", f"boundary_variance_argmax_{d}d", large > 0 and rate >= 0.95,
                               f"{rate:.2%} of {large} large-region trials"))
    return out


def _optimizer_checks() -> list[CheckResult]:
    out = []
    for d in (1, 2):
        pairs = acquisition_equivalence(d)
        same = sum(b == e for b, e in pairs)
        out.append(CheckResult("optimizers", f"boundary_vs_expander_{d}d", same == len(pairs),
                               f"{same}/{len(pairs)} iterations agree"))
    return out


# ---------------------------------------------------------------- benchmarks / control


def _benchmark_checks() -> list[CheckResult]:
    out = []
    for i, bench in enumerate(bm.BENCHMARKS.values()):
        chk = bm.validate_optimum(bench, np.random.default_rng(100 + i))
        out.append(CheckResult("benchmarks", f"optimum_{bench.name}", chk.error <= 1e-3,
                               f"found {chk.found_value:.6f} vs {chk.configured_value}"))
    return out


def _control_checks() -> list[CheckResult]:
    task = tuning_problem()
    ev = task.seed_evaluation()
    out = [CheckResult("control_sim", "seed_safe", ev.G_e > 0 and ev.G_u > 0 and not ev.metrics.unstable,
                       f"J={ev.J:.3f} G_e={ev.G_e:.3f} G_u={ev.G_u:.3f}")]
    Js = []
    for kpd, kid in itertools.product((0.1, 1.0), (1.0, 200.0)):
        g = ControllerGains(0.1, 0.2, kpd, kid, 0.5, 50.0)
        Js.append(task.evaluate_gains(g).J)
    spread = (max(Js) - min(Js)) / abs(ev.J)
    out.append(CheckResult("control_sim", "d_axis_insensitive_J", spread < 0.01, f"relative J spread {spread:.2e}"))
    worst = task.evaluate_gains(ControllerGains(0.5, 0.5, 1.0, 200.0, 1.0, 200.0))
    out.append(CheckResult("control_sim", "max_gains_unstable",
                           worst.metrics.unstable and worst.G_e < 0 and worst.G_u < 0,
                           f"J={worst.J:.1f} G_e={worst.G_e:.1f} G_u={worst.G_u:.1f}"))
    return out


_SUITES: dict[str, Callable[[], list[CheckResult]]] = {
    "kernels": _kernel_checks,
    "gp": _gp_checks,
    "safe_sets": _safe_set_checks,
    "optimizers": _optimizer_checks,
    "benchmarks": _benchmark_checks,
    "control_sim": _control_checks,
}


def run_checks(only: str | None = None) -> list[CheckResult]:
    if only is not None and only not in _SUITES:
        raise KeyError(f"unknown module {only!r}; choose from {', '.join(MODULES)}")
    names = [only] if only else list(MODULES)
    results = []
    for name in names:
        try:
            results.extend(_SUITES[name]())
        except Exception as exc:  # a crashing check is a failing check
            results.append(CheckResult(name, "suite", False, f"{type(exc).__name__}: {exc}"))
    return results


def format_table(results: list[CheckResult]) -> str:
    w_mod = max(len(r.module) for r in results)
    w_name = max(len(r.name) for r in results)
    lines = [f"{'module':<{w_mod}}  {'check':<{w_name}}  result  detail"]
    for r in results:
        lines.append(f"{r.module:<{w_mod}}  {r.name:<{w_name}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    return "\n".join(lines)
