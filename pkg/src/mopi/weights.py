"""Adversarial weight classes and the closed-form inner maximization.

For a miscoverage vector ``phi`` with ``phi_i = (m_i - alpha) / n`` the inner
problem ``max_f (1/n) sum_i f(Z_i)(m_i - alpha) - lam * f(Z_i)^2 - gamma ||f||^2``
is a concave quadratic in ``f`` and has a closed form for both classes here:

* indicator basis over finite Z:  sum_z S_z^2 / (4 lam n n_z),  S_z = sum_{Z_i=z} (m_i - alpha)
* Gaussian RKHS over real Z:      1/4 phi^T K (lam K / n + gamma I)^{-1} phi

Everything is a quadratic form in ``phi``, so values are non-negative and
gradients are linear in ``phi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .core import DimensionMismatch, EmptyGroup, NotPositiveDefinite, spd_solve

OTHER = -1  # group index for codes unseen at fit time; their weight is 0


@dataclass(frozen=True)
class MiscoverageVector:
    phi: np.ndarray
    alpha: float

    @classmethod
    def from_indicators(cls, m, alpha: float) -> "MiscoverageVector":
        m = np.asarray(m, dtype=float)
        if np.any(m < 0) or np.any(m > 1):
            raise ValueError("miscoverage indicators must lie in [0, 1]")
        if not 0 < alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        return cls((m - alpha) / m.size, float(alpha))

    @property
    def n(self) -> int:
        return self.phi.size

    @property
    def m(self) -> np.ndarray:
        return self.phi * self.n + self.alpha


def _phi_array(phi) -> np.ndarray:
    if isinstance(phi, MiscoverageVector):
        return phi.phi
    return np.asarray(phi, dtype=float)


# --------------------------------------------------------------------------
# kernels

def gaussian_kernel(z1, z2, bandwidth: float) -> float:
    """exp(-||z1 - z2||^2 / (2 bandwidth^2))."""
    z1 = np.atleast_1d(np.asarray(z1, dtype=float))
    z2 = np.atleast_1d(np.asarray(z2, dtype=float))
    if z1.shape != z2.shape:
        raise DimensionMismatch(f"kernel arguments have shapes {z1.shape} and {z2.shape}")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    d2 = float(np.sum((z1 - z2) ** 2))
    return float(np.exp(-d2 / (2.0 * bandwidth**2)))


def gaussian_cross(A, B, bandwidth: float) -> np.ndarray:
    """Kernel matrix between the rows of ``A`` and the rows of ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"point dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    d2 = cdist(A, B, "sqeuclidean")
    return np.exp(-d2 / (2.0 * bandwidth**2))


@dataclass(frozen=True)
class KernelGram:
    K: np.ndarray
    z_points: np.ndarray
    bandwidth: float

    @classmethod
    def build(cls, z_points, bandwidth: float) -> "KernelGram":
        Zp = np.asarray(z_points, dtype=float)
        if Zp.ndim == 1:
            Zp = Zp[:, None]
        K = gaussian_cross(Zp, Zp, bandwidth)
        K = 0.5 * (K + K.T)
        np.fill_diagonal(K, 1.0)
        return cls(K, Zp, float(bandwidth))

    @property
    def n(self) -> int:
        return self.K.shape[0]


# --------------------------------------------------------------------------
# weight classes

@dataclass(frozen=True)
class IndicatorBasis:
    """f(z) = sum_z beta_z 1{Z = z} over a finite list of category codes."""

    levels: tuple = ()

    kind = "indicator"

    @classmethod
    def from_codes(cls, codes) -> "IndicatorBasis":
        return cls(tuple(int(c) for c in np.unique(np.asarray(codes))))

    def group_index(self, codes) -> np.ndarray:
        """Map codes to level positions; unseen codes map to ``OTHER``."""
        codes = np.asarray(codes).astype(np.int64)
        levels = np.asarray(self.levels, dtype=np.int64)
        pos = np.searchsorted(levels, codes)
        pos = np.clip(pos, 0, max(len(levels) - 1, 0))
        ok = levels.size > 0
        hit = (levels[pos] == codes) if ok else np.zeros(codes.shape, bool)
        return np.where(hit, pos, OTHER)

    def to_dict(self):
        return {"kind": self.kind, "levels": list(self.levels)}


@dataclass(frozen=True)
class GaussianRKHS:
    bandwidth: float
    gamma: float

    kind = "rkhs"

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.gamma <= 0:
            raise ValueError("the RKHS class needs a strictly positive ridge gamma")

    def to_dict(self):
        return {"kind": self.kind, "bandwidth": self.bandwidth, "gamma": self.gamma}


def weight_from_dict(d) -> IndicatorBasis | GaussianRKHS:
    if d["kind"] == "indicator":
        return IndicatorBasis(tuple(d.get("levels", ())))
    if d["kind"] == "rkhs":
        return GaussianRKHS(float(d["bandwidth"]), float(d["gamma"]))
    raise ValueError(f"unknown weight class {d['kind']!r}")


# --------------------------------------------------------------------------
# closed forms

def _group_stats(z_codes, phi, levels=None):
    z_codes = np.asarray(z_codes).astype(np.int64)
    if z_codes.shape != phi.shape:
        raise DimensionMismatch(f"{z_codes.size} codes for {phi.size} miscoverage entries")
    basis = IndicatorBasis(tuple(levels)) if levels is not None else IndicatorBasis.from_codes(z_codes)
    idx = basis.group_index(z_codes)
    if np.any(idx == OTHER):
        raise EmptyGroup("observed codes are missing from the declared levels")
    k = len(basis.levels)
    counts = np.bincount(idx, minlength=k)
    if np.any(counts == 0):
        missing = [basis.levels[j] for j in np.flatnonzero(counts == 0)]
        raise EmptyGroup(f"levels {missing} have no members")
    sums = np.bincount(idx, weights=phi, minlength=k)  # sum of phi = S_z / n
    return basis, idx, counts, sums


def inner_max_indicator(z_codes, phi, *, levels=None, lam: float = 1.0):
    """Closed-form inner maximum over the indicator basis.

    Returns ``(value, beta)`` where ``beta`` maps each level to the
    maximizing coefficient ``S_z / (2 lam n_z)``.
    """
    phi = _phi_array(phi)
    n = phi.size
    basis, _, counts, sums = _group_stats(z_codes, phi, levels)
    # S_z = n * sums;  value = sum S_z^2 / (4 lam n n_z) = n * sum sums^2 / (4 lam n_z)
    value = float(n * np.sum(sums**2 / counts) / (4.0 * lam))
    beta = n * sums / (2.0 * lam * counts)
    return value, dict(zip(basis.levels, beta.tolist()))


def inner_max_rkhs(gram: KernelGram | np.ndarray, phi, gamma: float, *, lam: float = 1.0):
    """Closed-form inner maximum over a Gaussian RKHS.

    Returns ``(value, coef)`` with ``coef = 1/2 (lam K/n + gamma I)^{-1} phi``,
    the representer coefficients of the maximizing weight function.
    """
    K = gram.K if isinstance(gram, KernelGram) else np.asarray(gram, dtype=float)
    phi = _phi_array(phi)
    n = phi.size
    if K.shape != (n, n):
        raise DimensionMismatch(f"Gram matrix {K.shape} does not match {n} samples")
    if gamma <= 0:
        raise NotPositiveDefinite("gamma must be > 0 for the RKHS weight class")
    A = lam * K / n + gamma * np.eye(n)
    coef = 0.5 * spd_solve(A, phi)
    value = float(phi @ (K @ coef)) / 2.0
    return max(value, 0.0), coef


def inner_max_gradient(weight, context, phi, *, lam: float = 1.0) -> np.ndarray:
    """Gradient of the inner-max value with respect to ``phi``.

    ``context`` is the list of z codes (indicator basis) or the
    :class:`KernelGram` (RKHS).
    """
    phi = _phi_array(phi)
    if isinstance(weight, IndicatorBasis):
        levels = weight.levels or None
        _, idx, counts, sums = _group_stats(context, phi, levels)
        return phi.size * sums[idx] / (2.0 * lam * counts[idx])
    if isinstance(weight, GaussianRKHS):
        _, coef = inner_max_rkhs(context, phi, weight.gamma, lam=lam)
        K = context.K if isinstance(context, KernelGram) else np.asarray(context)
        return K @ coef
    raise TypeError(f"unsupported weight class {type(weight).__name__}")


class InnerMax:
    """Inner maximization bound to one calibration sample.

    Pre-computes everything that does not depend on ``phi`` so the solver's
    inner loop is one matrix-vector product (RKHS) or two bincounts
    (indicator).
    """

    def __init__(self, weight, z, *, lam: float = 1.0):
        self.weight = weight
        self.lam = float(lam)
        if isinstance(weight, IndicatorBasis):
            codes = np.asarray(z)
            if codes.ndim != 1:
                raise DimensionMismatch("the indicator class needs categorical z codes")
            basis = weight if weight.levels else IndicatorBasis.from_codes(codes)
            _, idx, counts, _ = _group_stats(codes, np.zeros(codes.size), basis.levels)
            self.basis, self.idx, self.counts = basis, idx, counts
            self.n = codes.size
        elif isinstance(weight, GaussianRKHS):
            gram = z if isinstance(z, KernelGram) else KernelGram.build(z, weight.bandwidth)
            n = gram.n
            A = self.lam * gram.K / n + weight.gamma * np.eye(n)
            # K and (lam K/n + gamma I) commute, so this product is symmetric
            M = spd_solve(A, gram.K)
            self.M = 0.5 * (M + M.T)
            self.gram = gram
            self.n = n
        else:
            raise TypeError(f"unsupported weight class {type(weight).__name__}")

    def value_and_grad(self, phi):
        phi = _phi_array(phi)
        if phi.size != self.n:
            raise DimensionMismatch(f"expected {self.n} miscoverage entries, got {phi.size}")
        if isinstance(self.weight, IndicatorBasis):
            k = self.counts.size
            sums = np.bincount(self.idx, weights=phi, minlength=k)
            value = float(self.n * np.sum(sums**2 / self.counts) / (4.0 * self.lam))
            grad = self.n * sums[self.idx] / (2.0 * self.lam * self.counts[self.idx])
            return value, grad
        Mphi = self.M @ phi
        value = max(float(phi @ Mphi) / 4.0, 0.0)
        return value, 0.5 * Mphi
