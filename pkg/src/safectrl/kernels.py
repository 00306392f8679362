"""Gaussian base kernels and their additive compositions.

The additive kernel of order ``n`` is the elementary symmetric polynomial of
degree ``n`` in the per-dimension base-kernel values ``z_1 .. z_d``.  All
orders are evaluated together with the Newton-Girard identities, which costs
O(d^2) per pair instead of the O(2^d) subset sum.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np


class KernelError(ValueError):
    """Invalid kernel hyperparameters or orders."""


class EmptyInputError(ValueError):
    pass


class KernelKind(str, Enum):
    FULL_RBF = "full_rbf"
    ADDITIVE = "additive"


def _positive_vector(values, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise KernelError(f"{name} must be a nonempty vector")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise KernelError(f"{name} must be strictly positive, got {arr}")
    return arr


@dataclass(frozen=True)
class BaseKernelParams:
    lengthscales: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        ls = _positive_vector(self.lengthscales, "lengthscales")
        var = _positive_vector(self.variances, "variances")
        if ls.shape != var.shape:
            raise KernelError("lengthscales and variances must have equal length")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    @classmethod
    def uniform(cls, dim: int, lengthscale: float = 1.0, variance: float = 1.0):
        return cls(np.full(dim, float(lengthscale)), np.full(dim, float(variance)))


@dataclass(frozen=True)
class KernelSpec:
    """Kernel configuration shared by the GP models.

    ``FULL_RBF`` is the ARD squared-exponential kernel, i.e. the product of the
    base kernels (the top-order additive term); ``order_weights`` is ignored.
    ``ADDITIVE`` sums ``order_weights[n-1] * e_n(z)`` for ``n = 1..max_order``.
    """

    kind: KernelKind
    base: BaseKernelParams
    order_weights: tuple[float, ...] = field(default=())
    max_order: int = 0

    def __post_init__(self):
        kind = KernelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        d = self.base.dim
        if kind is KernelKind.FULL_RBF:
            object.__setattr__(self, "max_order", d)
            object.__setattr__(self, "order_weights", ())
            return
        max_order = self.max_order or d
        if not 1 <= max_order <= d:
            raise KernelError(f"max_order must be in [1, {d}], got {max_order}")
        weights = tuple(float(w) for w in self.order_weights) or (1.0,) * max_order
        if len(weights) != max_order:
            raise KernelError(f"expected {max_order} order weights, got {len(weights)}")
        if any(w < 0 or not math.isfinite(w) for w in weights):
            raise KernelError("order weights must be finite and nonnegative")
        object.__setattr__(self, "max_order", max_order)
        object.__setattr__(self, "order_weights", weights)

    @property
    def dim(self) -> int:
        return self.base.dim

    @classmethod
    def full_rbf(cls, lengthscales: Sequence[float], variance: float = 1.0) -> "KernelSpec":
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        if variance <= 0:
            raise KernelError("variance must be positive")
        per_dim = np.full(ls.size, float(variance) ** (1.0 / ls.size))
        return cls(KernelKind.FULL_RBF, BaseKernelParams(ls, per_dim))

    @classmethod
    def additive(
        cls,
        lengthscales: Sequence[float],
        variances: Sequence[float] | float = 1.0,
        max_order: int | None = None,
        order_weights: Sequence[float] | None = None,
        total_variance: float | None = None,
    ) -> "KernelSpec":
        """Build an additive spec; ``total_variance`` rescales the weights so
        that ``k(a, a)`` equals it."""
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        var = np.broadcast_to(np.asarray(variances, dtype=float), ls.shape).copy()
        d = ls.size
        max_order = max_order or d
        weights = np.ones(max_order) if order_weights is None else np.asarray(order_weights, float)
        spec = cls(KernelKind.ADDITIVE, BaseKernelParams(ls, var), tuple(weights), max_order)
        if total_variance is not None:
            scale = float(total_variance) / spec.prior_variance()
            spec = cls(KernelKind.ADDITIVE, spec.base, tuple(weights * scale), max_order)
        return spec

    def prior_variance(self) -> float:
        """k(a, a), identical for every a."""
        v = self.base.variances
        if self.kind is KernelKind.FULL_RBF:
            return float(np.prod(v))
        e = elementary_symmetric(v, self.max_order)
        return float(np.dot(self.order_weights, e[1:]))

    def base_values(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """Per-dimension base kernels, shape (len(A), len(B), d)."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        diff = A[:, None, :] - B[None, :, :]
        return self.base.variances * np.exp(-0.5 * (diff / self.base.lengthscales) ** 2)

    def __call__(self, A, B) -> np.ndarray:
        """Kernel matrix between the rows of ``A`` and ``B``."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        if A.shape[1] != self.dim or B.shape[1] != self.dim:
            raise KernelError(f"points must have dimension {self.dim}")
        if self.kind is KernelKind.FULL_RBF:
            diff = (A[:, None, :] - B[None, :, :]) / self.base.lengthscales
            return self.prior_variance() * np.exp(-0.5 * np.einsum("ijk,ijk->ij", diff, diff))
        z = self.base_values(A, B)
        e = newton_girard(z, self.max_order)
        return np.tensordot(e[1:], np.asarray(self.order_weights), axes=(0, 0))

    def diag(self, A) -> np.ndarray:
        A = np.atleast_2d(A)
        return np.full(A.shape[0], self.prior_variance())


def base_kernel_eval(x_i: float, x_j: float, lengthscale: float, variance: float) -> float:
    if lengthscale <= 0 or variance <= 0:
        raise KernelError("lengthscale and variance must be positive")
    return variance * math.exp(-((x_i - x_j) ** 2) / (2.0 * lengthscale**2))


def full_rbf_kernel(a, b, lengthscale: float, variance: float) -> float:
    if lengthscale <= 0 or variance <= 0:
        raise KernelError("lengthscale and variance must be positive")
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(variance * np.exp(-np.dot(diff, diff) / (2.0 * lengthscale**2)))


def newton_girard(z: np.ndarray, max_order: int) -> np.ndarray:
    """Elementary symmetric polynomials e_0..e_max_order over the last axis.

    Returns an array of shape ``(max_order + 1,) + z.shape[:-1]``.
    """
    z = np.asarray(z, dtype=float)
    powers = [None]
    zk = np.ones_like(z)
    for _ in range(max_order):
        zk = zk * z
        powers.append(zk.sum(axis=-1))
    e = np.empty((max_order + 1,) + z.shape[:-1])
    e[0] = 1.0
    for n in range(1, max_order + 1):
        acc = np.zeros(z.shape[:-1])
        for k in range(1, n + 1):
            term = e[n - k] * powers[k]
            acc = acc + term if k % 2 == 1 else acc - term
        e[n] = acc / n
    return e


def elementary_symmetric(values, max_order: int) -> np.ndarray:
    """e_0..e_max_order of a 1-D vector via Newton-Girard."""
    return newton_girard(np.asarray(values, dtype=float)[None, :], max_order)[:, 0]


def _base_vector(a, b, base: BaseKernelParams) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != (base.dim,) or b.shape != (base.dim,):
        raise KernelError(f"points must have dimension {base.dim}")
    return base.variances * np.exp(-0.5 * ((a - b) / base.lengthscales) ** 2)


def additive_order_kernel_bruteforce(a, b, order: int, base: BaseKernelParams) -> float:
    """Degree-``order`` additive kernel by explicit subset enumeration."""
    d = base.dim
    if not 1 <= order <= d:
        raise KernelError(f"order must be in [1, {d}], got {order}")
    z = _base_vector(a, b, base)
    return float(sum(math.prod(z[list(idx)]) for idx in itertools.combinations(range(d), order)))


def additive_kernel_all_orders(a, b, spec: KernelSpec) -> float:
    if spec.kind is not KernelKind.ADDITIVE:
        raise KernelError("additive_kernel_all_orders needs an additive spec")
    z = _base_vector(a, b, spec.base)
    e = elementary_symmetric(z, spec.max_order)
    return float(np.dot(spec.order_weights, e[1:]))


def gram_matrix(points, spec: KernelSpec, jitter: bool = True) -> np.ndarray:
    """Kernel matrix of ``points`` with 1e-8 * mean(diag) added to the diagonal."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    if X.shape[0] == 0 or np.asarray(points).size == 0:
        raise EmptyInputError("gram_matrix needs at least one point")
    K = spec(X, X)
    K = 0.5 * (K + K.T)
    if jitter:
        K[np.diag_indices_from(K)] += 1e-8 * np.mean(np.diag(K))
    return K


def lipschitz_bound(spec: KernelSpec) -> float:
    """Lipschitz constant of ``x -> k(x, z)`` w.r.t. the Euclidean norm.

    Each 1-D Gaussian has slope at most ``v / (l * sqrt(e))``.  For a
    first-order additive kernel the bound is ``(sum_i L_i) * sqrt(d)``.  For
    higher orders the i-th partial derivative also carries the remaining
    factors, bounded by ``sum_n w_n e_{n-1}(v without i)``.
    """
    base = spec.base
    d = base.dim
    slopes = base.variances / (base.lengthscales * math.sqrt(math.e))
    per_dim = np.empty(d)
    for i in range(d):
        others = np.delete(base.variances, i)
        if spec.kind is KernelKind.FULL_RBF:
            per_dim[i] = slopes[i] * float(np.prod(others))
            continue
        e_rest = elementary_symmetric(others, spec.max_order - 1) if d > 1 else np.ones(1)
        e_rest = np.concatenate([e_rest, np.zeros(max(0, spec.max_order - e_rest.size))])
        per_dim[i] = slopes[i] * float(np.dot(spec.order_weights, e_rest[: spec.max_order]))
    return float(per_dim.sum() * math.sqrt(d))
