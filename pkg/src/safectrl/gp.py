"""Exact GP regression with an incrementally extended Cholesky factor."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .kernels import KernelSpec

REFACTOR_EVERY = 32


class GPError(ValueError):
    pass


class InvalidObservationError(GPError):
    pass


class InvalidConfidenceError(GPError):
    pass


class UndefinedInformationError(GPError):
    pass


class BoundSearchOverflowError(GPError):
    pass


@dataclass(frozen=True)
class Observation:
    point: np.ndarray
    value: float
    function_index: int = 0


@dataclass(frozen=True)
class ConfidenceBounds:
    lower: np.ndarray
    upper: np.ndarray
    beta: float

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def _jitter(kernel: KernelSpec) -> float:
    return 1e-8 * kernel.prior_variance()


@dataclass(frozen=True)
class GPState:
    """Immutable GP posterior state.

    ``chol`` is the lower Cholesky factor of ``K + (noise_std^2 + jitter) I``,
    ``white`` is ``chol^{-1} (y - prior_mean)`` and ``alpha`` the full solve.
    ``factor_id`` changes whenever the factor is rebuilt from scratch, which
    lets :class:`PosteriorCache` tell extensions from refactorizations.
    """

    kernel: KernelSpec
    noise_std: float
    prior_mean: float = 0.0
    X: np.ndarray = field(default=None)
    y: np.ndarray = field(default=None)
    chol: np.ndarray = field(default=None)
    white: np.ndarray = field(default=None)
    alpha: np.ndarray = field(default=None)
    factor_id: int = 0
    since_refactor: int = 0
    function_index: int = 0

    def __post_init__(self):
        if self.noise_std < 0 or not math.isfinite(self.noise_std):
            raise GPError("noise_std must be finite and nonnegative")
        d = self.kernel.dim
        if self.X is None:
            object.__setattr__(self, "X", np.empty((0, d)))
            object.__setattr__(self, "y", np.empty(0))
            object.__setattr__(self, "chol", np.empty((0, 0)))
            object.__setattr__(self, "white", np.empty(0))
            object.__setattr__(self, "alpha", np.empty(0))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def diag_noise(self) -> float:
        return self.noise_std**2 + _jitter(self.kernel)

    @property
    def observations(self) -> list[Observation]:
        return [Observation(x.copy(), float(v), self.function_index) for x, v in zip(self.X, self.y)]

    def update(self, obs: Observation | tuple) -> "GPState":
        return gp_update(self, obs)

    def posterior(self, queries) -> tuple[np.ndarray, np.ndarray]:
        return posterior(self, queries)

    def confidence_bounds(self, queries, beta: float) -> ConfidenceBounds:
        return confidence_bounds(self, queries, beta)


def _coerce_obs(obs) -> tuple[np.ndarray, float]:
    if isinstance(obs, Observation):
        x, v = obs.point, obs.value
    else:
        x, v = obs
    x = np.asarray(x, dtype=float).ravel()
    v = float(v)
    if not math.isfinite(v) or not np.all(np.isfinite(x)):
        raise InvalidObservationError(f"non-finite observation {x!r} -> {v!r}")
    return x, v


def refactorize(state: GPState, X: np.ndarray, y: np.ndarray, factor_id: int | None = None) -> GPState:
    """Build a state from scratch with a full Cholesky factorization."""
    kernel = state.kernel
    if X.shape[0] == 0:
        return GPState(kernel, state.noise_std, state.prior_mean, function_index=state.function_index)
    K = kernel(X, X)
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += state.noise_std**2 + _jitter(kernel)
    L = np.linalg.cholesky(K)
    resid = y - state.prior_mean
    white = solve_triangular(L, resid, lower=True)
    alpha = solve_triangular(L.T, white, lower=False)
    return GPState(
        kernel,
        state.noise_std,
        state.prior_mean,
        X,
        y,
        L,
        white,
        alpha,
        factor_id=state.factor_id + 1 if factor_id is None else factor_id,
        since_refactor=0,
        function_index=state.function_index,
    )


def gp_update(state: GPState, obs, refactor_every: int = REFACTOR_EVERY) -> GPState:
    """Return a new state including ``obs``; the input state is untouched."""
    x, v = _coerce_obs(obs)
    if x.size != state.kernel.dim:
        raise InvalidObservationError(f"point has dimension {x.size}, expected {state.kernel.dim}")
    X = np.vstack([state.X, x[None, :]])
    y = np.append(state.y, v)
    if state.n == 0 or state.since_refactor + 1 >= refactor_every:
        return refactorize(state, X, y)

    kx = state.kernel(state.X, x[None, :])[:, 0]
    row = solve_triangular(state.chol, kx, lower=True)
    kxx = state.kernel.prior_variance() + state.diag_noise
    pivot_sq = kxx - row @ row
    if pivot_sq <= 1e-12 * kxx:
        return refactorize(state, X, y)
    pivot = math.sqrt(pivot_sq)
    n = state.n
    L = np.zeros((n + 1, n + 1))
    L[:n, :n] = state.chol
    L[n, :n] = row
    L[n, n] = pivot
    w_new = (v - state.prior_mean - row @ state.white) / pivot
    white = np.append(state.white, w_new)
    alpha = solve_triangular(L.T, white, lower=False)
    return GPState(
        state.kernel,
        state.noise_std,
        state.prior_mean,
        X,
        y,
        L,
        white,
        alpha,
        factor_id=state.factor_id,
        since_refactor=state.since_refactor + 1,
        function_index=state.function_index,
    )


def posterior(state: GPState, queries) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at each query (variance clamped to [0, k(a,a)])."""
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    prior_var = state.kernel.prior_variance()
    if state.n == 0:
        return np.full(Q.shape[0], state.prior_mean), np.full(Q.shape[0], prior_var)
    Kq = state.kernel(state.X, Q)
    mean = state.prior_mean + Kq.T @ state.alpha
    V = solve_triangular(state.chol, Kq, lower=True)
    var = prior_var - np.einsum("ij,ij->j", V, V)
    return mean, np.clip(var, 0.0, prior_var)


def confidence_bounds(state: GPState, queries, beta: float) -> ConfidenceBounds:
    if not beta > 0:
        raise InvalidConfidenceError("beta must be positive")
    mean, var = posterior(state, queries)
    std = np.sqrt(var)
    return ConfidenceBounds(mean - beta * std, mean + beta * std, float(beta))


def bounds_from_moments(mean: np.ndarray, var: np.ndarray, beta: float) -> ConfidenceBounds:
    if not beta > 0:
        raise InvalidConfidenceError("beta must be positive")
    std = np.sqrt(var)
    return ConfidenceBounds(mean - beta * std, mean + beta * std, float(beta))


def beta_schedule(t: int, rkhs_bound_B: float, noise_R: float, delta: float, gamma_prev: float) -> float:
    """Confidence multiplier B + R sqrt(2 (gamma_{t-1} + 1 + ln(1/delta)))."""
    if not 0.0 < delta < 1.0:
        raise InvalidConfidenceError(f"delta must lie in (0, 1), got {delta}")
    if t < 1 or rkhs_bound_B < 0 or noise_R < 0 or gamma_prev < 0:
        raise GPError("beta_schedule needs t >= 1 and nonnegative B, R, gamma")
    return rkhs_bound_B + noise_R * math.sqrt(2.0 * (gamma_prev + 1.0 + math.log(1.0 / delta)))


def empirical_information_gain(state: GPState) -> float:
    """0.5 * log det(I + K / noise^2) from the stored factor."""
    if state.noise_std <= 0:
        raise UndefinedInformationError("information gain needs noise_std > 0")
    if state.n == 0:
        return 0.0
    # log det(K + s^2 I) from the factor; the jitter contributes O(1e-8 k / s^2).
    return float(np.sum(np.log(np.diag(state.chol))) - state.n * math.log(state.noise_std))


def stage_iteration_bounds(
    epsilon: float,
    zeta: float,
    d: int,
    B: float,
    R: float,
    delta: float,
    C: float,
    C_gamma: float,
    cap: int = 10**9,
) -> tuple[int, int]:
    """Smallest iteration counts satisfying the expansion and maximization bounds.

    Information gain is replaced by its upper bound ``C_gamma * d * ln t``.
    Small t are scanned linearly; beyond that both inequalities are monotone
    (left side linear or 1/t, right side logarithmic), so the search doubles
    and then bisects.
    """
    if epsilon <= 0 or zeta <= 0:
        raise GPError("epsilon and zeta must be positive")

    def beta_at(t: int) -> float:
        gamma_prev = C_gamma * d * math.log(t - 1) if t > 1 else 0.0
        return beta_schedule(t, B, R, delta, gamma_prev)

    def expansion_ok(t: int) -> bool:
        return t >= C * (beta_at(t) * math.sqrt(d) / epsilon) ** d

    def maximization_ok(t: int) -> bool:
        if t < 2:
            return False
        g = C_gamma * d * math.log(t)
        bracket = B + R * math.sqrt(2.0 * (g + 1.0 + math.log(1.0 / delta)))
        return g / t * bracket**2 <= zeta**2 / 4.0

    return _smallest_satisfying(expansion_ok, cap), _smallest_satisfying(maximization_ok, cap)


def _smallest_satisfying(pred, cap: int) -> int:
    for t in range(1, 65):
        if pred(t):
            return t
    hi = 64
    while not pred(hi):
        hi *= 2
        if hi > cap:
            raise BoundSearchOverflowError(f"no solution below cap {cap}")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if pred(mid):
            hi = mid
        else:
            lo = mid
    return hi


class PosteriorCache:
    """Posterior moments over a growing candidate set, kept in sync with a GP.

    Holds ``V = chol^{-1} K(X, C)`` so that a one-observation extension of the
    state costs O(n |C|) instead of O(n^2 |C|).
    """

    def __init__(self, state: GPState, candidates: np.ndarray):
        self.state = state
        self.C = np.atleast_2d(np.asarray(candidates, dtype=float)).copy()
        self._rebuild()

    def _rebuild(self):
        s = self.state
        if s.n == 0:
            self.V = np.empty((0, self.C.shape[0]))
        else:
            self.V = solve_triangular(s.chol, s.kernel(s.X, self.C), lower=True)
        self._refresh_moments()

    def _refresh_moments(self):
        s = self.state
        prior = s.kernel.prior_variance()
        self.mean = s.prior_mean + self.V.T @ s.white
        var = prior - np.einsum("ij,ij->j", self.V, self.V)
        self.var = np.clip(var, 0.0, prior)

    def sync(self, new_state: GPState):
        old = self.state
        self.state = new_state
        extended = (
            new_state.factor_id == old.factor_id
            and new_state.n == old.n + 1
            and old.n > 0
        )
        if not extended:
            self._rebuild()
            return
        L = new_state.chol
        n = old.n
        k_new = new_state.kernel(new_state.X[n : n + 1], self.C)[0]
        v_row = (k_new - L[n, :n] @ self.V) / L[n, n]
        self.V = np.vstack([self.V, v_row[None, :]])
        self._refresh_moments()

    def add_candidates(self, points: np.ndarray):
        P = np.atleast_2d(np.asarray(points, dtype=float))
        if P.shape[0] == 0:
            return
        s = self.state
        self.C = np.vstack([self.C, P])
        if s.n == 0:
            V_new = np.empty((0, P.shape[0]))
        else:
            V_new = solve_triangular(s.chol, s.kernel(s.X, P), lower=True)
        self.V = np.hstack([self.V, V_new])
        self._refresh_moments()

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def bounds(self, beta: float) -> ConfidenceBounds:
        return bounds_from_moments(self.mean, self.var, beta)

    def cross_cov(self, i: int, cols: np.ndarray | slice | None = None) -> np.ndarray:
        """Posterior covariance between candidate ``i`` and candidates ``cols``."""
        cols = slice(None) if cols is None else cols
        k = self.state.kernel(self.C[i : i + 1], self.C[cols])[0]
        return k - self.V[:, i] @ self.V[:, cols]

    def cross_cov_block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Posterior covariance matrix between candidates ``rows`` and ``cols``."""
        k = self.state.kernel(self.C[rows], self.C[cols])
        return k - self.V[:, rows].T @ self.V[:, cols]
