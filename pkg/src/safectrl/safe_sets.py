"""Candidate-set partitions: safe set, safe boundary, expanders, maximizers."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .gp import ConfidenceBounds, PosteriorCache


class SafeSetError(ValueError):
    pass


class EmptySafeSetError(SafeSetError):
    pass


class CandidateSource(str, Enum):
    GRID = "grid"
    SWARM = "swarm"
    RANDOM_UNIFORM = "random_uniform"


@dataclass(frozen=True)
class BoxDomain:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise SafeSetError("domain bounds must satisfy lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, x, tol: float = 1e-12) -> bool | np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def clip(self, x) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lower + rng.random((n, self.dim)) * self.width

    def grid(self, resolution: int | Sequence[int]) -> np.ndarray:
        res = np.broadcast_to(np.asarray(resolution, dtype=int), (self.dim,))
        axes = [np.linspace(lo, hi, r) for lo, hi, r in zip(self.lower, self.upper, res)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class CandidateSet:
    points: np.ndarray
    source: CandidateSource = CandidateSource.GRID

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] == 0:
            raise SafeSetError("candidate set must be nonempty")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "source", CandidateSource(self.source))


@dataclass
class SafeSetSnapshot:
    safe_mask: np.ndarray
    boundary_mask: np.ndarray
    margins: np.ndarray
    expander_mask: np.ndarray | None = None
    maximizer_mask: np.ndarray | None = None

    def check(self):
        for name in ("boundary_mask", "expander_mask", "maximizer_mask"):
            m = getattr(self, name)
            if m is not None and np.any(m & ~self.safe_mask):
                raise SafeSetError(f"{name} is not a subset of the safe set")


def constraint_margins(bounds: Sequence[ConfidenceBounds], thresholds: Sequence[float]) -> np.ndarray:
    """``l_i(a) - h_i`` with shape (n_candidates, n_constraints)."""
    if len(bounds) != len(thresholds):
        raise SafeSetError(f"{len(bounds)} bound sets but {len(thresholds)} thresholds")
    if not bounds:
        raise SafeSetError("at least one constraint is required")
    return np.stack([b.lower - h for b, h in zip(bounds, thresholds)], axis=-1)


def compute_safe_set(bounds: Sequence[ConfidenceBounds], thresholds: Sequence[float]) -> np.ndarray:
    margins = constraint_margins(bounds, thresholds)
    return np.all(margins >= 0.0, axis=-1)


def compute_boundary_set(
    margins: np.ndarray,
    safe_mask: np.ndarray,
    tolerance_band: float | Sequence[float],
    fallback_count: int = 10,
) -> np.ndarray:
    """Safe candidates where some constraint's lower bound sits within its band.

    ``tolerance_band`` may be a scalar or one value per constraint.  When no
    candidate qualifies, the ``fallback_count`` safe candidates with the
    smallest band-normalized margin are returned instead.
    """
    margins = np.asarray(margins, dtype=float)
    if margins.ndim == 1:
        margins = margins[:, None]
    band = np.broadcast_to(np.asarray(tolerance_band, dtype=float), margins.shape[1:])
    if np.any(band <= 0):
        raise SafeSetError("tolerance band must be positive")
    scaled = margins / band
    closest = scaled.min(axis=-1)
    mask = safe_mask & (closest <= 1.0) & np.all(margins >= 0.0, axis=-1)
    if mask.any() or fallback_count <= 0:
        return mask
    safe_idx = np.flatnonzero(safe_mask)
    if safe_idx.size == 0:
        return mask
    order = np.argsort(closest[safe_idx], kind="stable")
    mask = np.zeros_like(safe_mask)
    mask[safe_idx[order[:fallback_count]]] = True
    return mask


def compute_maximizer_set(perf_bounds: ConfidenceBounds, safe_mask: np.ndarray) -> np.ndarray:
    if not np.any(safe_mask):
        raise EmptySafeSetError("maximizer set of an empty safe set")
    best_lower = perf_bounds.lower[safe_mask].max()
    return safe_mask & (perf_bounds.upper >= best_lower)


def hypothetical_lower(
    cache: PosteriorCache, i: int, targets: np.ndarray, beta: float
) -> np.ndarray:
    """Lower bounds at ``targets`` after observing ``u(a_i)`` at candidate ``i``.

    Rank-one posterior update; equivalent to updating a copy of the GP with
    the optimistic observation and re-querying.
    """
    s = cache.var[i] + cache.state.diag_noise
    std_i = np.sqrt(cache.var[i])
    c = cache.cross_cov(i, targets)
    mean_new = cache.mean[targets] + c * (beta * std_i / s)
    var_new = np.maximum(cache.var[targets] - c * c / s, 0.0)
    return mean_new - beta * np.sqrt(var_new)


def hypothetical_lower_block(
    cache: PosteriorCache, rows: np.ndarray, targets: np.ndarray, beta: float
) -> np.ndarray:
    """:func:`hypothetical_lower` for several candidates at once, shape (rows, targets)."""
    s = cache.var[rows] + cache.state.diag_noise
    std = np.sqrt(cache.var[rows])
    c = cache.cross_cov_block(rows, targets)
    mean_new = cache.mean[targets][None, :] + c * (beta * std / s)[:, None]
    var_new = np.maximum(cache.var[targets][None, :] - c * c / s[:, None], 0.0)
    return mean_new - beta * np.sqrt(var_new)


def liftable_targets(
    caches: Sequence[PosteriorCache], unsafe_idx: np.ndarray, beta: float,
    thresholds: Sequence[float], mode: str = "all",
) -> np.ndarray:
    """Unsafe candidates that some single observation could possibly certify.

    One observation raises a lower bound by at most ``2 beta sigma``, so a
    target whose upper bound is below the threshold can never be lifted.
    """
    ok = np.stack([c.bounds(beta).upper[unsafe_idx] >= h for c, h in zip(caches, thresholds)], axis=-1)
    keep = np.all(ok, axis=-1) if mode == "all" else np.any(ok, axis=-1)
    return unsafe_idx[keep]


def first_expander(
    caches: Sequence[PosteriorCache],
    order: np.ndarray,
    unsafe_idx: np.ndarray,
    beta: float,
    thresholds: Sequence[float],
    mode: str = "all",
    block: int = 32,
) -> int | None:
    """First candidate in ``order`` that is an expander, checked in blocks."""
    targets = liftable_targets(caches, unsafe_idx, beta, thresholds, mode)
    if targets.size == 0:
        return None
    for start in range(0, order.size, block):
        rows = order[start : start + block]
        lifted = np.stack(
            [hypothetical_lower_block(c, rows, targets, beta) >= h for c, h in zip(caches, thresholds)],
            axis=-1,
        )
        if mode == "all":
            hit = np.any(np.all(lifted, axis=-1), axis=-1)
        elif mode == "any":
            hit = np.any(lifted, axis=(1, 2))
        else:
            raise SafeSetError(f"unknown expander mode {mode!r}")
        if hit.any():
            return int(rows[int(np.argmax(hit))])
    return None


def is_expander(
    caches: Sequence[PosteriorCache],
    i: int,
    unsafe_idx: np.ndarray,
    beta: float,
    thresholds: Sequence[float],
    mode: str = "all",
) -> bool:
    """Would observing candidate ``i`` optimistically certify an unsafe candidate?

    ``mode="all"`` requires one unsafe candidate to satisfy every constraint;
    ``mode="any"`` accepts any constraint lifting any unsafe candidate.
    """
    if unsafe_idx.size == 0:
        return False
    lifted = np.stack(
        [hypothetical_lower(c, i, unsafe_idx, beta) >= h for c, h in zip(caches, thresholds)],
        axis=-1,
    )
    if mode == "all":
        return bool(np.any(np.all(lifted, axis=-1)))
    if mode == "any":
        return bool(np.any(lifted))
    raise SafeSetError(f"unknown expander mode {mode!r}")


def compute_expander_set(
    caches: Sequence[PosteriorCache],
    safe_mask: np.ndarray,
    beta: float,
    thresholds: Sequence[float],
    unsafe_mask: np.ndarray | None = None,
    mode: str = "all",
) -> np.ndarray:
    """Full expander mask over the candidates held by ``caches``.

    ``unsafe_mask`` defaults to the complement of ``safe_mask``.
    """
    if len(caches) != len(thresholds):
        raise SafeSetError("one cache per constraint is required")
    unsafe_idx = np.flatnonzero(~safe_mask if unsafe_mask is None else unsafe_mask)
    mask = np.zeros_like(safe_mask)
    if unsafe_idx.size == 0:
        return mask
    for i in np.flatnonzero(safe_mask):
        mask[i] = is_expander(caches, i, unsafe_idx, beta, thresholds, mode)
    return mask


def masked_argmax(values: np.ndarray, mask: np.ndarray, tiebreak: np.ndarray | None = None) -> int:
    """Index of the largest masked value; ties go to the smallest tiebreak key."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise EmptySafeSetError("argmax over an empty set")
    vals = values[idx]
    ties = idx[vals == vals.max()]
    if tiebreak is None or ties.size == 1:
        return int(ties[0])
    return int(ties[np.argmin(tiebreak[ties])])


def outermost_region(
    boundary_points: np.ndarray, evaluated_safe: np.ndarray, steps: int = 41
) -> tuple[np.ndarray, np.ndarray]:
    """Segments from each boundary point to its nearest evaluated safe point.

    Returns ``(points, lam)`` with points of shape (n_boundary * steps, d);
    ``lam == 1`` marks the boundary end of each segment.
    """
    B = np.atleast_2d(boundary_points)
    E = np.atleast_2d(evaluated_safe)
    if B.shape[0] == 0 or E.shape[0] == 0:
        raise SafeSetError("outermost region needs boundary and evaluated points")
    d2 = ((B[:, None, :] - E[None, :, :]) ** 2).sum(-1)
    oes = E[np.argmin(d2, axis=1)]
    lam = np.linspace(0.0, 1.0, steps)
    pts = oes[:, None, :] + lam[None, :, None] * (B - oes)[:, None, :]
    return pts.reshape(-1, B.shape[1]), np.tile(lam, B.shape[0])
