"""MOPI fitting: minimize the smoothed closed-form minimax objective.

The objective for shape parameters ``theta`` is

    V(theta) = inner_max(phi(theta)) + nu * ||theta||^2,
    phi_i(theta) = (S(T(h_theta(X_i), Y_i)) - alpha) / n,

with ``S`` a smooth surrogate of the miscoverage step. Its gradient is the
chain  dV/dphi  ->  S'(T) / n  ->  dT/dh  ->  vjp of the shape model.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .core import NonFiniteObjective
from .sets import PredictionRule, Surrogate
from .weights import IndicatorBasis, InnerMax


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class SolverConfig:
    surrogate: Surrogate = field(default_factory=Surrogate)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    iterations: int = 2000
    nu: float = 0.0
    lam: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.nu < 0:
            raise ValueError("nu must be non-negative")


class Adam:
    """Plain full-batch Adam on a flat parameter vector."""

    def __init__(self, n_params: int, config: AdamConfig = AdamConfig()):
        self.cfg = config
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, theta, grad):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * grad**2
        m_hat = self.m / (1.0 - c.beta1**self.t)
        v_hat = self.v / (1.0 - c.beta2**self.t)
        return theta - c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


@dataclass
class FitTrace:
    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    best_iteration: int = -1
    params: np.ndarray | None = None
    wall_time: float = 0.0

    def record(self, value, grad):
        self.objective.append(float(value))
        self.grad_norm.append(float(np.linalg.norm(grad)))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "grad_norm"])
            for i, (v, g) in enumerate(zip(self.objective, self.grad_norm)):
                w.writerow([i, f"{v:.17g}", f"{g:.17g}"])


def _weight_context(weight, cal):
    if isinstance(weight, IndicatorBasis):
        if cal.z_kind != "categorical":
            raise TypeError("the indicator weight class needs categorical z")
        return cal.Z
    return cal.Z


class MopiObjective:
    """Objective bound to one calibration set; caches the inner-max context."""

    def __init__(self, family, shape, weight, cal, alpha: float, surrogate: Surrogate | None,
                 *, nu: float = 0.0, lam: float = 1.0, inner: InnerMax | None = None):
        if not 0 < alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        self.family, self.shape, self.cal = family, shape, cal
        self.alpha, self.surrogate = float(alpha), surrogate
        self.nu = float(nu)
        self.inner = inner or InnerMax(weight, _weight_context(weight, cal), lam=lam)
        self.X, self.Y = cal.X, cal.Y

    def __call__(self, theta):
        model = self.shape.with_params(theta)
        H = model.forward(self.X)
        n = self.X.shape[0]
        T, dT = self.family.statistic(H, self.X, self.Y, with_grad=True)
        if self.surrogate is None:
            m = (T > 0).astype(float)
            dm = np.zeros_like(T)
        else:
            m = self.surrogate(T)
            dm = self.surrogate.derivative(T)
        phi = (m - self.alpha) / n
        value, dphi = self.inner.value_and_grad(phi)
        cot = (dphi * dm / n)[:, None] * dT
        grad = model.vjp(self.X, cot)
        if self.nu:
            value += self.nu * float(theta @ theta)
            grad = grad + 2.0 * self.nu * theta
        return value, grad


def mopi_objective(family, shape, weight, cal, alpha, surrogate=Surrogate(), *, nu=0.0, lam=1.0):
    """Objective value and parameter gradient at ``shape.params``.

    ``surrogate=None`` evaluates hard miscoverage indicators (gradient then
    only carries the ``nu`` penalty).
    """
    obj = MopiObjective(family, shape, weight, cal, alpha, surrogate, nu=nu, lam=lam)
    return obj(shape.params)


def fit_mopi(family, shape, weight, cal, alpha, config: SolverConfig = SolverConfig(), *, config_hash=""):
    """Fit a MOPI prediction rule by full-batch Adam from ``shape``'s parameters.

    ``shape`` should be at its neutral initialization (see
    :func:`mopi.shapes.init_shape`). The lowest-objective iterate is
    returned, not the last one.
    """
    t0 = time.perf_counter()
    obj = MopiObjective(family, shape, weight, cal, alpha, config.surrogate, nu=config.nu, lam=config.lam)
    opt = Adam(shape.n_params, config.optimizer)
    trace = FitTrace()
    theta = shape.params.copy()
    best_val, best_theta = np.inf, theta
    for it in range(config.iterations + 1):
        value, grad = obj(theta)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            trace.wall_time = time.perf_counter() - t0
            raise NonFiniteObjective(f"objective became non-finite at iteration {it}", trace)
        trace.record(value, grad)
        if value < best_val:
            best_val, best_theta, trace.best_iteration = value, theta, it
        if it < config.iterations:
            theta = opt.step(theta, grad)
    trace.params = best_theta.copy()
    trace.wall_time = time.perf_counter() - t0
    rule = PredictionRule(family, shape.with_params(best_theta), "MOPI", config_hash)
    return rule, trace


# --------------------------------------------------------------------------
# exact check of the minimax / MSCE equivalence on finite laws

@dataclass
class DiscreteLaw:
    """Finite joint law of (X, Y, Z): ``prob[i]`` for support triple i.

    ``x``, ``y`` and ``z`` are integer labels of the support points.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    prob: np.ndarray

    def __post_init__(self):
        self.x, self.y, self.z = (np.asarray(a, dtype=np.int64) for a in (self.x, self.y, self.z))
        self.prob = np.asarray(self.prob, dtype=float)
        if abs(self.prob.sum() - 1.0) > 1e-12 or np.any(self.prob < 0):
            raise ValueError("probabilities must be non-negative and sum to 1")

    @classmethod
    def random(cls, rng, n_x=4, n_y=3, n_z=3):
        if not 1 <= n_z <= n_x:
            raise ValueError("need 1 <= n_z <= n_x so that every z level carries mass")
        rng = np.random.default_rng(rng) if not hasattr(rng, "dirichlet") else rng
        xs, ys = np.meshgrid(np.arange(n_x), np.arange(n_y), indexing="ij")
        xs, ys = xs.ravel(), ys.ravel()
        zmap = rng.integers(0, n_z, size=n_x)
        zmap[:n_z] = np.arange(n_z)  # every z level has mass
        return cls(xs, ys, zmap[xs], rng.dirichlet(np.ones(xs.size)))


def conditional_miscoverage(law: DiscreteLaw, cover) -> dict:
    """alpha(z; C) = P(Y not in C(X) | Z = z); ``cover[x, y]`` is membership."""
    miss = ~np.asarray(cover, dtype=bool)[law.x, law.y]
    out = {}
    for z in np.unique(law.z):
        sel = law.z == z
        out[int(z)] = float(np.sum(law.prob[sel] * miss[sel]) / np.sum(law.prob[sel]))
    return out


def population_msce(law: DiscreteLaw, cover, alpha) -> float:
    a = conditional_miscoverage(law, cover)
    return float(sum(law.prob[law.z == z].sum() * (a[z] - alpha) ** 2 for z in a))


def population_inner_max(law: DiscreteLaw, cover, alpha) -> float:
    """max over indicator-basis f of E[f(Z)(1{Y not in C(X)} - alpha) - f(Z)^2].

    Solved as a generic concave quadratic in the basis coefficients
    (normal equations), without using the per-group closed form.
    """
    miss = (~np.asarray(cover, dtype=bool)[law.x, law.y]).astype(float)
    levels = np.unique(law.z)
    B = (law.z[:, None] == levels[None, :]).astype(float)  # basis design
    G = B.T @ (law.prob[:, None] * B)
    b = B.T @ (law.prob * (miss - alpha))
    beta = 0.5 * np.linalg.solve(G, b)
    return float(beta @ b - beta @ G @ beta)


def verify_prop_equivalence(law: DiscreteLaw, candidates, alpha: float, tol: float = 1e-10) -> dict:
    """Check max_f Psi(C, f) == MSCE(C)/4 for each candidate set and that both
    criteria pick the same candidate."""
    msce = np.array([population_msce(law, c, alpha) for c in candidates])
    psi = np.array([population_inner_max(law, c, alpha) for c in candidates])
    gaps = np.abs(psi - msce / 4.0)
    return {
        "msce": msce,
        "max_psi": psi,
        "max_abs_gap": float(gaps.max()),
        "identity_holds": bool(np.all(gaps <= tol)),
        "argmin_msce": int(np.argmin(msce)),
        "argmin_minimax": int(np.argmin(psi)),
        "argmin_agree": bool(np.argmin(msce) == np.argmin(psi)),
    }
