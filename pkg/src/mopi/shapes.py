"""Shape models h: X -> R^m with flat parameter vectors and analytic VJPs.

All models are evaluated in batch: ``forward(X)`` maps ``(n, d_X)`` to
``(n, m)`` and ``vjp(X, C)`` returns ``grad_theta sum_i <C_i, h(X_i)>``.
"""

from __future__ import annotations

import numpy as np

from .core import DimensionMismatch, as_rng
from .weights import OTHER, gaussian_cross


class ShapeModel:
    kind = "base"

    def __init__(self, m: int, params):
        self.m = int(m)
        params = np.asarray(params, dtype=float).ravel().copy()
        if params.size != self.n_params:
            raise DimensionMismatch(f"{self.kind} expects {self.n_params} parameters, got {params.size}")
        self.params = params

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    def _x(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        d = getattr(self, "d_x", None)
        if d is not None and X.shape[1] != d:
            raise DimensionMismatch(f"{self.kind} expects {d} covariates, got {X.shape[1]}")
        return X

    def _cot(self, X, C):
        C = np.asarray(C, dtype=float)
        if C.ndim == 1:
            C = C.reshape(X.shape[0], self.m)
        if C.shape != (X.shape[0], self.m):
            raise DimensionMismatch(f"cotangent shape {C.shape} != {(X.shape[0], self.m)}")
        return C

    def with_params(self, params) -> "ShapeModel":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = np.asarray(params, dtype=float).ravel().copy()
        if clone.params.size != self.n_params:
            raise DimensionMismatch("parameter count changed")
        return clone

    def forward(self, X) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, X, C) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"kind": self.kind, "m": self.m, "params": self.params.tolist(), **self.config()}


class ConstantVector(ShapeModel):
    kind = "constant"

    @property
    def n_params(self):
        return self.m

    def forward(self, X):
        X = self._x(X)
        return np.broadcast_to(self.params, (X.shape[0], self.m)).copy()

    def vjp(self, X, C):
        X = self._x(X)
        return self._cot(X, C).sum(axis=0)


class IndicatorShape(ShapeModel):
    """Piecewise-constant h over the cells of a partition of X.

    ``partition`` is any object with ``codes(X) -> int array``. The last
    parameter row belongs to codes not listed in ``levels``.
    """

    kind = "indicator"

    def __init__(self, m, params, partition, levels):
        self.partition = partition
        self.levels = tuple(int(v) for v in levels)
        super().__init__(m, params)

    @property
    def n_params(self):
        return (len(self.levels) + 1) * self.m

    def cell_index(self, X):
        codes = np.asarray(self.partition.codes(X), dtype=np.int64)
        levels = np.asarray(self.levels, dtype=np.int64)
        pos = np.clip(np.searchsorted(levels, codes), 0, len(levels) - 1)
        idx = np.where(levels[pos] == codes, pos, OTHER)
        return np.where(idx == OTHER, len(levels), idx)

    def forward(self, X):
        X = self._x(X)
        table = self.params.reshape(len(self.levels) + 1, self.m)
        return table[self.cell_index(X)]

    def vjp(self, X, C):
        X = self._x(X)
        C = self._cot(X, C)
        k = len(self.levels) + 1
        idx = self.cell_index(X)
        out = np.zeros((k, self.m))
        np.add.at(out, idx, C)
        return out.ravel()

    def config(self):
        return {"partition": self.partition.to_dict(), "levels": list(self.levels)}


FEATURE_MAPS = {
    "affine": lambda X: np.hstack([np.ones((X.shape[0], 1)), X]),
    "quadratic": lambda X: np.hstack([np.ones((X.shape[0], 1)), X, X**2]),
}


class LinearFeatures(ShapeModel):
    """h(x) = W phi(x) for a named feature map whose first column is 1."""

    kind = "linear"

    def __init__(self, m, params, d_x, feature_map="affine"):
        self.d_x = int(d_x)
        self.feature_map = feature_map
        self._phi = FEATURE_MAPS[feature_map]
        self.n_features = self._phi(np.zeros((1, self.d_x))).shape[1]
        super().__init__(m, params)

    @property
    def n_params(self):
        return self.m * self.n_features

    def features(self, X):
        return self._phi(self._x(X))

    def forward(self, X):
        return self.features(X) @ self.params.reshape(self.m, self.n_features).T

    def vjp(self, X, C):
        F = self.features(X)
        return (self._cot(F, C).T @ F).ravel()

    def config(self):
        return {"d_x": self.d_x, "feature_map": self.feature_map}


class RkhsRepresenter(ShapeModel):
    """h_k(x) = b_k + sum_j c_kj K(anchor_j, x) with a Gaussian kernel."""

    kind = "rkhs"

    def __init__(self, m, params, anchors, bandwidth):
        self.anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
        self.d_x = self.anchors.shape[1]
        self.bandwidth = float(bandwidth)
        self._cache = [None, None]  # shared with clones from with_params
        super().__init__(m, params)

    @property
    def n_anchor(self):
        return self.anchors.shape[0]

    @property
    def n_params(self):
        return self.m * (self.n_anchor + 1)

    def kernel(self, X):
        # the solver calls forward/vjp on one array many times
        if self._cache[0] is X:
            return self._cache[1]
        K = gaussian_cross(self._x(X), self.anchors, self.bandwidth)
        self._cache[:] = [X, K]
        return K

    def _split(self):
        c = self.params[: self.m * self.n_anchor].reshape(self.m, self.n_anchor)
        return c, self.params[self.m * self.n_anchor:]

    def forward(self, X):
        c, b = self._split()
        return self.kernel(X) @ c.T + b

    def vjp(self, X, C):
        K = self.kernel(X)
        C = self._cot(K, C)
        return np.concatenate([(C.T @ K).ravel(), C.sum(axis=0)])

    def penalty_matrix(self):
        return gaussian_cross(self.anchors, self.anchors, self.bandwidth)

    def config(self):
        return {"anchors": self.anchors.tolist(), "bandwidth": self.bandwidth}


class TwoLayerMlp(ShapeModel):
    """d_X -> width (tanh) -> m, with fixed input standardization."""

    kind = "mlp"

    def __init__(self, m, params, d_x, width, x_shift=None, x_scale=None):
        self.d_x = int(d_x)
        self.width = int(width)
        self.x_shift = np.zeros(self.d_x) if x_shift is None else np.asarray(x_shift, dtype=float)
        self.x_scale = np.ones(self.d_x) if x_scale is None else np.asarray(x_scale, dtype=float)
        super().__init__(m, params)

    @property
    def n_params(self):
        w, d, m = self.width, self.d_x, self.m
        return w * d + w + m * w + m

    def unpack(self):
        w, d, m = self.width, self.d_x, self.m
        p = self.params
        i = 0
        W1 = p[i:i + w * d].reshape(w, d); i += w * d
        b1 = p[i:i + w]; i += w
        W2 = p[i:i + m * w].reshape(m, w); i += m * w
        b2 = p[i:i + m]
        return W1, b1, W2, b2

    def _hidden(self, X):
        Xs = (self._x(X) - self.x_shift) / self.x_scale
        W1, b1, _, _ = self.unpack()
        return Xs, np.tanh(Xs @ W1.T + b1)

    def forward(self, X):
        _, A = self._hidden(X)
        _, _, W2, b2 = self.unpack()
        return A @ W2.T + b2

    def vjp(self, X, C):
        Xs, A = self._hidden(X)
        C = self._cot(Xs, C)
        _, _, W2, _ = self.unpack()
        gW2 = C.T @ A
        gb2 = C.sum(axis=0)
        D = (C @ W2) * (1.0 - A**2)
        gW1 = D.T @ Xs
        gb1 = D.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def config(self):
        return {"d_x": self.d_x, "width": self.width,
                "x_shift": self.x_shift.tolist(), "x_scale": self.x_scale.tolist()}


SHAPES = {c.kind: c for c in (ConstantVector, IndicatorShape, LinearFeatures, RkhsRepresenter, TwoLayerMlp)}


def forward(model: ShapeModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = model.forward(np.atleast_2d(x))
    return out[0] if x.ndim == 1 else out


def vjp(model: ShapeModel, x, cotangent) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return model.vjp(x, np.asarray(cotangent, dtype=float).reshape(x.shape[0], model.m))


def init_shape(kind: str, m: int, *, neutral=0.0, rng=0, X=None, **kw) -> ShapeModel:
    """Build a shape model at its neutral point.

    ``neutral`` is the constant output (length ``m`` or scalar) the model
    produces at initialization: the pretrain score quantile for sublevel
    sets, zero for boxes and ellipsoids. ``X`` supplies reference covariates
    for models that need them (anchors, input standardization, partition
    levels).
    """
    offset = np.broadcast_to(np.asarray(neutral, dtype=float), (m,)).copy()
    if kind == "constant":
        return ConstantVector(m, offset)
    if kind == "indicator":
        partition = kw["partition"]
        levels = kw.get("levels")
        if levels is None:
            levels = np.unique(partition.codes(X))
        table = np.tile(offset, (len(levels) + 1, 1))
        return IndicatorShape(m, table, partition, levels)
    if kind == "linear":
        fmap = kw.get("feature_map", "affine")
        d_x = X.shape[1] if X is not None else int(kw["d_x"])
        model = LinearFeatures(m, np.zeros(m * FEATURE_MAPS[fmap](np.zeros((1, d_x))).shape[1]), d_x, fmap)
        W = model.params.reshape(m, model.n_features)
        W[:, 0] = offset
        return model
    if kind == "rkhs":
        anchors = kw.get("anchors")
        if anchors is None:
            n_anchor = int(kw.get("n_anchor", 100))
            X = np.atleast_2d(np.asarray(X, dtype=float))
            n_anchor = min(n_anchor, X.shape[0])
            pick = np.sort(as_rng(rng).choice(X.shape[0], size=n_anchor, replace=False))
            anchors = X[pick]
        anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
        params = np.concatenate([np.zeros(m * anchors.shape[0]), offset])
        return RkhsRepresenter(m, params, anchors, kw["bandwidth"])
    if kind == "mlp":
        width = int(kw.get("width", 32))
        d_x = X.shape[1] if X is not None else int(kw["d_x"])
        if X is not None:
            shift, scale = X.mean(axis=0), X.std(axis=0)
            scale = np.where(scale > 0, scale, 1.0)
        else:
            shift, scale = None, None
        bound = 1.0 / np.sqrt(d_x)
        W1 = as_rng(rng).uniform(-bound, bound, size=(width, d_x))
        # zero output layer: the initial shape is exactly the neutral one
        params = np.concatenate([W1.ravel(), np.zeros(width), np.zeros(m * width), offset])
        return TwoLayerMlp(m, params, d_x, width, shift, scale)
    raise ValueError(f"unknown shape kind {kind!r}")
