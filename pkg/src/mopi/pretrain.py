"""Frozen components fitted on the pretraining split.

Each component has ``predict`` (means, scales) or ``whiten`` (covariance
models), a JSON-able ``to_dict`` and a ``content_hash`` used to pin
prediction rules to the exact artifacts they were calibrated against.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from .core import (DimensionMismatch, EmptyGroup, MopiError, NonFiniteObjective,
                   NotPositiveDefinite, require_role, spd_solve)
from .sets import SOFTPLUS_SHIFT, softplus
from .shapes import TwoLayerMlp, init_shape
from .solver import Adam, AdamConfig


class SingularDesign(MopiError, np.linalg.LinAlgError):
    pass


class Component:
    kind = "component"

    def to_dict(self) -> dict:
        raise NotImplementedError

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class LinearMean(Component):
    kind = "linear_mean"

    def __init__(self, W, b):
        self.W = np.atleast_2d(np.asarray(W, dtype=float))
        self.b = np.asarray(b, dtype=float).ravel()

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.W.shape[1]:
            raise DimensionMismatch(f"mean map expects {self.W.shape[1]} covariates")
        return X @ self.W.T + self.b

    def to_dict(self):
        return {"kind": self.kind, "W": self.W.tolist(), "b": self.b.tolist()}


class KnnMean(Component):
    kind = "knn_mean"

    def __init__(self, X, Y, k):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.Y = np.asarray(Y, dtype=float).reshape(self.X.shape[0], -1)
        self.k = int(k)
        self._tree = cKDTree(self.X)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        _, idx = self._tree.query(X, k=self.k)
        idx = np.asarray(idx).reshape(X.shape[0], self.k)
        return self.Y[idx].mean(axis=1)

    def to_dict(self):
        return {"kind": self.kind, "X": self.X.tolist(), "Y": self.Y.tolist(), "k": self.k}


class ConstantScales(Component):
    kind = "constant_scales"

    def __init__(self, sigma):
        self.sigma = np.asarray(sigma, dtype=float).ravel()

    def predict(self, X):
        X = np.atleast_2d(X)
        return np.broadcast_to(self.sigma, (X.shape[0], self.sigma.size)).copy()

    def to_dict(self):
        return {"kind": self.kind, "sigma": self.sigma.tolist()}


class GroupedScales(Component):
    """Piecewise-constant per-coordinate scales; points outside every listed
    group fall back to the global scale (last table row)."""

    kind = "grouped_scales"

    def __init__(self, partition, levels, table):
        self.partition = partition
        self.levels = tuple(int(v) for v in levels)
        self.table = np.atleast_2d(np.asarray(table, dtype=float))

    def predict(self, X):
        codes = np.asarray(self.partition.codes(np.atleast_2d(X)), dtype=np.int64)
        levels = np.asarray(self.levels, dtype=np.int64)
        pos = np.clip(np.searchsorted(levels, codes), 0, len(levels) - 1)
        idx = np.where(levels[pos] == codes, pos, len(levels))
        return self.table[idx]

    def to_dict(self):
        return {"kind": self.kind, "partition": self.partition.to_dict(),
                "levels": list(self.levels), "table": self.table.tolist()}


class GlobalCovariance(Component):
    kind = "global_covariance"

    def __init__(self, cov, inv_sqrt=None):
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.inv_sqrt = _inv_sqrt(self.cov) if inv_sqrt is None else np.atleast_2d(np.asarray(inv_sqrt, dtype=float))
        _, logdet = np.linalg.slogdet(self.cov)
        self._half_logdet = 0.5 * logdet

    @property
    def d_y(self):
        return self.cov.shape[0]

    def whiten(self, X, R):
        return np.asarray(R, dtype=float) @ self.inv_sqrt  # symmetric root

    def log_sqrt_det_cov(self, X):
        return np.full(np.atleast_2d(X).shape[0], self._half_logdet)

    def to_dict(self):
        return {"kind": self.kind, "cov": self.cov.tolist(), "inv_sqrt": self.inv_sqrt.tolist()}


def cholesky_from_raw(H, d):
    rows, cols = np.tril_indices(d)
    diag = rows == cols
    vals = np.where(diag, softplus(H + SOFTPLUS_SHIFT), H)
    L = np.zeros((H.shape[0], d, d))
    L[:, rows, cols] = vals
    return L


class NllCovarianceNet(Component):
    """x -> L0(x), the Cholesky factor of the inverse covariance, via an MLP."""

    kind = "nll_covariance_net"

    def __init__(self, net: TwoLayerMlp, d_y: int):
        self.net = net
        self.d_y = int(d_y)

    def cholesky(self, X):
        return cholesky_from_raw(self.net.forward(np.atleast_2d(X)), self.d_y)

    def whiten(self, X, R):
        return np.einsum("nij,ni->nj", self.cholesky(X), np.asarray(R, dtype=float))

    def log_sqrt_det_cov(self, X):
        L = self.cholesky(X)
        return -np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)

    def inverse_covariance(self, X):
        L = self.cholesky(X)
        return L @ np.transpose(L, (0, 2, 1))

    def to_dict(self):
        return {"kind": self.kind, "d_y": self.d_y, "net": self.net.to_dict()}


class ScaledWhitener(Component):
    """``c * base.whiten``: the same covariance model with every ellipsoid
    rescaled by ``1 / c``."""

    kind = "scaled_whitener"

    def __init__(self, base, scale: float):
        if not scale > 0:
            raise ValueError("scale must be positive")
        self.base = base
        self.scale = float(scale)

    @property
    def d_y(self):
        return self.base.d_y

    def whiten(self, X, R):
        return self.scale * self.base.whiten(X, R)

    def log_sqrt_det_cov(self, X):
        return self.base.log_sqrt_det_cov(X) - self.d_y * math.log(self.scale)

    def to_dict(self):
        return {"kind": self.kind, "scale": self.scale, "base": self.base.to_dict()}


def _inv_sqrt(cov):
    w, V = np.linalg.eigh(cov)
    if np.any(w <= 0):
        raise NotPositiveDefinite("covariance is not positive definite")
    return (V / np.sqrt(w)) @ V.T


# --------------------------------------------------------------------------
# fitting

def fit_ridge_mean(pre, ridge: float = 0.0) -> LinearMean:
    """Least squares ``y ~ W x + b`` with an unpenalized intercept."""
    require_role(pre, "pretrain")
    X, Y = pre.X, pre.Y
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    G = Xc.T @ Xc + ridge * np.eye(X.shape[1])
    try:
        W = spd_solve(G, Xc.T @ Yc).T
    except NotPositiveDefinite as exc:
        raise SingularDesign(f"design is rank deficient: {exc}") from None
    return LinearMean(W, ym - W @ xm)


def fit_knn_mean(pre, k: int = 20) -> KnnMean:
    require_role(pre, "pretrain")
    if not 1 <= k <= pre.n:
        raise ValueError(f"k must lie in [1, {pre.n}]")
    return KnnMean(pre.X, pre.Y, k)


def fit_scales(pre, mean, grouping=None, min_group_size: int = 2):
    """Residual standard deviations per coordinate, globally or per group."""
    require_role(pre, "pretrain")
    R = pre.Y - mean.predict(pre.X)
    glob = R.std(axis=0)
    if grouping is None:
        return ConstantScales(glob)
    codes = np.asarray(grouping.codes(pre.X), dtype=np.int64)
    levels = grouping.levels() if hasattr(grouping, "levels") else np.unique(codes)
    rows = []
    for lv in levels:
        sel = codes == lv
        if sel.sum() < min_group_size:
            raise EmptyGroup(f"group {lv} has {int(sel.sum())} pretraining samples (< {min_group_size})")
        rows.append(R[sel].std(axis=0))
    rows.append(glob)
    return GroupedScales(grouping, levels, np.array(rows))


def fit_global_covariance(pre, mean, jitter: float = 1e-8) -> GlobalCovariance:
    require_role(pre, "pretrain")
    R = pre.Y - mean.predict(pre.X)
    if pre.n <= pre.d_y:
        raise ValueError("need more pretraining samples than label dimensions")
    cov = np.atleast_2d(np.cov(R, rowvar=False)) + jitter * np.eye(pre.d_y)
    return GlobalCovariance(cov)


def nll_loss_and_grad(net: TwoLayerMlp, X, R, d_y):
    """Gaussian NLL (1/n) sum [1/2 ||L(x)^T r||^2 - sum_j log L_jj(x)] and its
    gradient with respect to the network parameters."""
    n = X.shape[0]
    H = net.forward(X)
    L = cholesky_from_raw(H, d_y)
    U = np.einsum("nij,ni->nj", L, R)
    rows, cols = np.tril_indices(d_y)
    diag = rows == cols
    Ld = L[:, rows[diag], cols[diag]]
    loss = float(np.sum(0.5 * np.sum(U**2, axis=1) - np.sum(np.log(Ld), axis=1)) / n)
    dL = R[:, rows] * U[:, cols]
    dL[:, diag] -= 1.0 / Ld
    dH = dL * np.where(diag, expit(H + SOFTPLUS_SHIFT), 1.0) / n
    return loss, net.vjp(X, dH)


def fit_nll_covariance_net(pre, mean, *, width: int = 16, iterations: int = 2000,
                           lr: float = 1e-2, seed: int = 0) -> NllCovarianceNet:
    require_role(pre, "pretrain")
    X = pre.X
    R = pre.Y - mean.predict(X)
    d = pre.d_y
    net = init_shape("mlp", d * (d + 1) // 2, neutral=0.0, rng=seed, X=X, width=width)
    opt = Adam(net.n_params, AdamConfig(lr=lr))
    theta = net.params.copy()
    best = (np.inf, theta)
    for it in range(iterations + 1):
        loss, grad = nll_loss_and_grad(net.with_params(theta), X, R, d)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NonFiniteObjective(f"NLL became non-finite at iteration {it}")
        if loss < best[0]:
            best = (loss, theta)
        if it < iterations:
            theta = opt.step(theta, grad)
    return NllCovarianceNet(net.with_params(best[1]), d)


def fit_ellipsoid_shape_init(pre, family, alpha: float, *, width: int = 16, iterations: int = 500,
                             lr: float = 1e-2, seed: int = 0):
    """Warm start for an MLP ellipsoid shape.

    Fits a Gaussian NLL covariance net to the family's whitened pretraining
    residuals, then rescales the family's whitener so the net's ellipsoids
    hold a ``1 - alpha`` fraction of those residuals. Returns
    ``(whitener, net)``: the rescaled whitener for a new family and the
    network to use as the initial shape.
    """
    require_role(pre, "pretrain")
    W = family.whitened(pre.X, pre.Y)
    d = W.shape[1]
    white = type(pre)(pre.X, W, role="pretrain")
    nll = fit_nll_covariance_net(white, LinearMean(np.zeros((d, pre.d_x)), np.zeros(d)),
                                 width=width, iterations=iterations, lr=lr, seed=seed)
    q = float(np.quantile(np.sum(nll.whiten(pre.X, W) ** 2, axis=1), 1.0 - alpha))
    if not q > 0:
        raise NonFiniteObjective("degenerate warm-start quantile")
    return ScaledWhitener(family.whitener, 1.0 / math.sqrt(q)), nll.net
