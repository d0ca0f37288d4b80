"""Split conformal (SCP) and conditional calibration (CC) baselines.

Both calibrate the threshold of a :class:`~mopi.sets.Sublevel` family. SCP
uses one constant; CC fits a threshold function by quantile (pinball)
regression on the calibration split only, the cheap non-full variant.
"""

from __future__ import annotations

import math
import time

import numpy as np

from .core import EmptyGroup, MopiError, NonFiniteObjective
from .sets import PredictionRule, Sublevel
from .shapes import ConstantVector, IndicatorShape, init_shape
from .solver import Adam, FitTrace, SolverConfig
from .weights import GaussianRKHS, IndicatorBasis


class InsufficientCalibration(MopiError, ValueError):
    pass


def pinball_loss(u, v, alpha):
    """(u - v)(1{u > v} - alpha); minimized in v by the (1 - alpha) quantile of u."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    d = np.asarray(u, dtype=float) - np.asarray(v, dtype=float)
    out = d * ((d > 0) - alpha)
    return float(out) if out.ndim == 0 else out


def conformal_rank(n: int, alpha: float) -> int:
    """1-based rank ceil((n + 1)(1 - alpha)) of the split-conformal threshold."""
    k = math.ceil((n + 1) * (1.0 - alpha) - 1e-9)
    if k > n:
        raise InsufficientCalibration(f"n = {n} is too small for alpha = {alpha} (need rank {k})")
    return max(k, 1)


def group_rank(n_z: int, alpha: float) -> int:
    """Lowest minimizer of the in-group pinball loss: rank ceil(n_z (1 - alpha))."""
    return max(math.ceil(n_z * (1.0 - alpha) - 1e-9), 1)


def _scores(family, cal):
    if not isinstance(family, Sublevel):
        raise TypeError("baselines calibrate sublevel families only")
    return family.score(cal.X, cal.Y)


def fit_scp(family: Sublevel, cal, alpha: float, *, config_hash: str = "") -> PredictionRule:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    s = np.sort(_scores(family, cal))
    thr = float(s[conformal_rank(s.size, alpha) - 1])
    return PredictionRule(family, ConstantVector(1, [thr]), "SCP", config_hash, {"threshold": thr})


class CcObjective:
    """Mean pinball loss of an RKHS threshold function plus gamma ||f||^2.

    ``f(x) = b + sum_j a_j K(x, anchor_j)`` so ``||f||^2 = a^T K_anchor a``.
    Returns a subgradient (exact gradient away from the kinks).
    """

    def __init__(self, shape, X, scores, alpha, gamma):
        self.shape, self.X, self.s = shape, X, np.asarray(scores, dtype=float)
        self.alpha, self.gamma = float(alpha), float(gamma)
        self.P = shape.penalty_matrix()
        self.n_coef = shape.n_anchor

    def __call__(self, theta):
        model = self.shape.with_params(theta)
        v = model.forward(self.X)[:, 0]
        n = v.size
        d = self.s - v
        loss = float(np.sum(d * ((d > 0) - self.alpha)) / n)
        a = theta[: self.n_coef]
        Pa = self.P @ a
        value = loss + self.gamma * float(a @ Pa)
        dv = -((d > 0) - self.alpha) / n
        grad = model.vjp(self.X, dv[:, None])
        grad[: self.n_coef] += 2.0 * self.gamma * Pa
        return value, grad


def fit_cc(family: Sublevel, weight, cal, alpha: float, config: SolverConfig = SolverConfig(), *,
           partition=None, bandwidth_x=None, n_anchor=None, config_hash: str = ""):
    """Conditional-calibration threshold function.

    ``weight`` picks the class of threshold functions:

    * :class:`IndicatorBasis` -- one threshold per group; the calibration
      ``Z`` codes define the groups and ``partition.codes(X)`` recovers them
      at prediction time. Codes never seen in calibration use the SCP
      threshold.
    * :class:`GaussianRKHS` -- ``b + sum_j a_j K(x, x_j)`` over calibration
      covariates, fitted by subgradient Adam from the SCP constant. The
      threshold must be computable at test time, so the kernel acts on
      ``X``.

    Returns ``(rule, trace)``; ``trace`` is None for the indicator class.
    """
    s = _scores(family, cal)
    n = s.size
    scp = np.sort(s)[conformal_rank(n, alpha) - 1]
    if isinstance(weight, IndicatorBasis):
        if partition is None:
            raise ValueError("the indicator class needs the partition that produced the Z codes")
        codes = np.asarray(cal.Z, dtype=np.int64)
        levels = weight.levels or tuple(int(v) for v in np.unique(codes))
        table = []
        for lv in levels:
            g = np.sort(s[codes == lv])
            if g.size == 0:
                raise EmptyGroup(f"group {lv} has no calibration samples")
            table.append(g[group_rank(g.size, alpha) - 1])
        table.append(scp)
        shape = IndicatorShape(1, np.array(table), partition, levels)
        meta = {"thresholds": dict(zip(levels, map(float, table[:-1])))}
        return PredictionRule(family, shape, "CC", config_hash, meta), None
    if not isinstance(weight, GaussianRKHS):
        raise TypeError(f"unsupported weight class {type(weight).__name__}")

    t0 = time.perf_counter()
    bw = weight.bandwidth if bandwidth_x is None else bandwidth_x
    if n_anchor is None or n_anchor >= n:
        shape = init_shape("rkhs", 1, neutral=scp, anchors=cal.X, bandwidth=bw)
    else:
        shape = init_shape("rkhs", 1, neutral=scp, rng=config.seed, X=cal.X, n_anchor=n_anchor, bandwidth=bw)
    obj = CcObjective(shape, cal.X, s, alpha, weight.gamma)
    opt = Adam(shape.n_params, config.optimizer)
    trace = FitTrace()
    theta = shape.params.copy()
    best_val, best_theta = np.inf, theta
    for it in range(config.iterations + 1):
        value, grad = obj(theta)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise NonFiniteObjective(f"CC objective became non-finite at iteration {it}", trace)
        trace.record(value, grad)
        if value < best_val:
            best_val, best_theta, trace.best_iteration = value, theta, it
        if it < config.iterations:
            theta = opt.step(theta, grad)
    trace.params = best_theta.copy()
    trace.wall_time = time.perf_counter() - t0
    rule = PredictionRule(family, shape.with_params(best_theta), "CC", config_hash, {"scp_threshold": float(scp)})
    return rule, trace
