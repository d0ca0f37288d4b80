"""Structured set families C(x; h) = {y : T(h(x), y) <= 0}.

Three families are supported:

``Sublevel``   T = s(x, y) - h(x)                 (h is a scalar threshold)
``Box``        T = max_j |y~_j| / exp(h_j(x)) - 1   y~ = (y - mu0(x)) / sigma0(x)
``Ellipsoid``  T = ||L(h(x))^T y~||^2 - 1          y~ = W0(x) (y - mu0(x))

where ``L(h)`` is lower triangular with softplus-positive diagonal and ``W0``
is the pretrained whitening map. Every family returns the statistic together
with its derivative in ``h``, which the solver chains with the shape model's
vector-Jacobian product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln, ndtr

from .core import DimensionMismatch, MopiError
from .weights import MiscoverageVector

SOFTPLUS_SHIFT = math.log(math.e - 1.0)  # softplus(0 + shift) == 1


class Unsupported(MopiError, NotImplementedError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def log_unit_ball_volume(d: int) -> float:
    return 0.5 * d * math.log(math.pi) - float(gammaln(0.5 * d + 1.0))


# --------------------------------------------------------------------------
# smoothing

@dataclass(frozen=True)
class Surrogate:
    """Smooth stand-in for the step ``1{t > 0}``."""

    kind: str = "erf"
    r: float = 0.1

    def __post_init__(self):
        if self.kind not in ("sigmoid", "erf"):
            raise ValueError(f"unknown surrogate {self.kind!r}")
        if not self.r > 0:
            raise ValueError("smoothing parameter r must be positive")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "sigmoid":
            return expit(t / self.r)
        return ndtr(t / self.r)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "sigmoid":
            s = expit(t / self.r)
            return s * (1.0 - s) / self.r
        return np.exp(-0.5 * (t / self.r) ** 2) / (math.sqrt(2.0 * math.pi) * self.r)

    def to_dict(self):
        return {"kind": self.kind, "r": self.r}


def smoothed_miscoverage(surrogate: Surrogate, t):
    return surrogate(t)


# --------------------------------------------------------------------------
# pretrained scores for the sublevel family

class AbsResidualScore:
    """s(x, y) = |y - mu0(x)| for scalar labels."""

    kind = "abs_residual"

    def __init__(self, mean):
        self.mean = mean

    def components(self):
        return {"mean": self.mean}

    def __call__(self, X, Y):
        Y = np.asarray(Y, dtype=float).reshape(len(X), -1)
        if Y.shape[1] != 1:
            raise DimensionMismatch("the absolute-residual score needs a scalar label")
        return np.abs(Y[:, 0] - self.mean.predict(X)[:, 0])

    def log_volume(self, X, h):
        with np.errstate(divide="ignore"):
            return np.log(2.0 * np.maximum(h, 0.0))


class MahalanobisScore:
    """s(x, y) = (y - mu0(x))^T Sigma0(x)^{-1} (y - mu0(x))."""

    kind = "mahalanobis"

    def __init__(self, mean, whitener):
        self.mean = mean
        self.whitener = whitener

    def components(self):
        return {"mean": self.mean, "whitener": self.whitener}

    def __call__(self, X, Y):
        R = np.asarray(Y, dtype=float) - self.mean.predict(X)
        W = self.whitener.whiten(X, R)
        return np.sum(W**2, axis=1)

    def log_volume(self, X, h):
        d = self.whitener.d_y
        with np.errstate(divide="ignore"):
            return log_unit_ball_volume(d) + 0.5 * d * np.log(np.maximum(h, 0.0)) + self.whitener.log_sqrt_det_cov(X)


class NormalizedMaxScore:
    """s(x, y) = ||(y - mu0(x)) / sigma0(x)||_inf (the box score)."""

    kind = "normalized_max"

    def __init__(self, mean, scales):
        self.mean = mean
        self.scales = scales

    def components(self):
        return {"mean": self.mean, "scales": self.scales}

    def __call__(self, X, Y):
        R = np.asarray(Y, dtype=float) - self.mean.predict(X)
        return np.max(np.abs(R) / self.scales.predict(X), axis=1)

    def log_volume(self, X, h):
        s0 = self.scales.predict(X)
        d = s0.shape[1]
        with np.errstate(divide="ignore"):
            return d * np.log(2.0 * np.maximum(h, 0.0)) + np.sum(np.log(s0), axis=1)


SCORES = {c.kind: c for c in (AbsResidualScore, MahalanobisScore, NormalizedMaxScore)}


# --------------------------------------------------------------------------
# families

class Sublevel:
    kind = "sublevel"

    def __init__(self, score, d_y: int = 1):
        self.score = score
        self.d_y = int(d_y)

    shape_dim = 1

    def components(self):
        return self.score.components()

    def statistic(self, H, X, Y, *, with_grad: bool = False):
        H = _check_h(H, 1, len(X))
        T = self.score(X, Y) - H[:, 0]
        if with_grad:
            return T, -np.ones_like(H)
        return T

    def log_volume(self, H, X):
        H = _check_h(H, 1, len(X))
        fn = getattr(self.score, "log_volume", None)
        if fn is None:
            raise Unsupported(f"no closed-form volume for score {self.score.kind!r}")
        return fn(X, H[:, 0])


class Box:
    kind = "box"

    def __init__(self, mean, scales, d_y: int):
        self.mean = mean
        self.scales = scales
        self.d_y = int(d_y)

    @property
    def shape_dim(self):
        return self.d_y

    def components(self):
        return {"mean": self.mean, "scales": self.scales}

    def normalized(self, X, Y):
        Y = np.asarray(Y, dtype=float)
        if Y.ndim != 2 or Y.shape[1] != self.d_y:
            raise DimensionMismatch(f"labels must have {self.d_y} columns")
        return (Y - self.mean.predict(X)) / self.scales.predict(X)

    def statistic(self, H, X, Y, *, with_grad: bool = False):
        H = _check_h(H, self.d_y, len(X))
        A = np.abs(self.normalized(X, Y)) * np.exp(-H)
        j = np.argmax(A, axis=1)
        rows = np.arange(A.shape[0])
        T = A[rows, j] - 1.0
        if not with_grad:
            return T
        G = np.zeros_like(H)
        G[rows, j] = -A[rows, j]
        return T, G

    def log_volume(self, H, X):
        H = _check_h(H, self.d_y, len(X))
        s0 = self.scales.predict(X)
        return np.sum(np.log(2.0 * s0) + H, axis=1)


class Ellipsoid:
    kind = "ellipsoid"

    def __init__(self, mean, whitener, d_y: int):
        self.mean = mean
        self.whitener = whitener
        self.d_y = int(d_y)
        self.rows, self.cols = np.tril_indices(self.d_y)
        self.is_diag = self.rows == self.cols

    @property
    def shape_dim(self):
        return self.d_y * (self.d_y + 1) // 2

    def components(self):
        return {"mean": self.mean, "whitener": self.whitener}

    def whitened(self, X, Y):
        Y = np.asarray(Y, dtype=float)
        if Y.ndim != 2 or Y.shape[1] != self.d_y:
            raise DimensionMismatch(f"labels must have {self.d_y} columns")
        return self.whitener.whiten(X, Y - self.mean.predict(X))

    def cholesky(self, H):
        """Lower-triangular factors L(h) of the inverse shape matrix, (n, d, d)."""
        H = _check_h(H, self.shape_dim, None)
        vals = np.where(self.is_diag, softplus(H + SOFTPLUS_SHIFT), H)
        L = np.zeros((H.shape[0], self.d_y, self.d_y))
        L[:, self.rows, self.cols] = vals
        return L

    def statistic(self, H, X, Y, *, with_grad: bool = False):
        H = _check_h(H, self.shape_dim, len(X))
        W = self.whitened(X, Y)
        L = self.cholesky(H)
        U = np.einsum("nij,ni->nj", L, W)  # L^T w
        T = np.sum(U**2, axis=1) - 1.0
        if not with_grad:
            return T
        dL = 2.0 * W[:, self.rows] * U[:, self.cols]
        chain = np.where(self.is_diag, expit(H + SOFTPLUS_SHIFT), 1.0)
        return T, dL * chain

    def log_volume(self, H, X):
        H = _check_h(H, self.shape_dim, len(X))
        diag = softplus(H[:, self.is_diag] + SOFTPLUS_SHIFT)
        return log_unit_ball_volume(self.d_y) + self.whitener.log_sqrt_det_cov(X) - np.sum(np.log(diag), axis=1)


FAMILIES = {c.kind: c for c in (Sublevel, Box, Ellipsoid)}


def _check_h(H, m, n):
    H = np.asarray(H, dtype=float)
    if H.ndim == 1:
        H = H[:, None] if m == 1 else H[None, :]
    if H.shape[1] != m or (n is not None and H.shape[0] != n):
        raise DimensionMismatch(f"shape values have shape {H.shape}, expected ({n}, {m})")
    return H


def defining_statistic(family, h_x, x, y) -> float:
    """T(h(x), y) for a single point."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    h = np.atleast_2d(np.asarray(h_x, dtype=float))
    return float(family.statistic(h, x, y)[0])


def miscoverage_vector(family, H, data, alpha: float, surrogate: Surrogate | None = None) -> MiscoverageVector:
    """Pack (smoothed) miscoverage of every calibration point as ``phi``."""
    T = family.statistic(H, data.X, data.Y)
    m = (T > 0).astype(float) if surrogate is None else surrogate(T)
    return MiscoverageVector.from_indicators(m, alpha)


# --------------------------------------------------------------------------
# fitted rules

@dataclass
class PredictionRule:
    family: object
    shape: object
    method: str = "MOPI"
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def shape_values(self, X):
        return self.shape.forward(np.atleast_2d(np.asarray(X, dtype=float)))

    def statistic(self, X, Y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
        return self.family.statistic(self.shape_values(X), X, Y)

    def contains(self, X, Y):
        """Membership of each ``Y[i]`` in the set at ``X[i]`` (vectorized)."""
        return self.statistic(X, Y) <= 0.0

    def log_volume(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.family.log_volume(self.shape_values(X), X)

    def volume(self, X):
        return np.exp(self.log_volume(X))


def contains(rule: PredictionRule, x, y) -> bool:
    return bool(rule.contains(np.atleast_2d(x), np.atleast_2d(y))[0])


def volume(rule: PredictionRule, x) -> float:
    return float(rule.volume(np.atleast_2d(x))[0])
