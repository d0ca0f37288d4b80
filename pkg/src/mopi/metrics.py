"""Coverage diagnostics for fitted prediction rules on test data.

Medians use the lower-middle element for even counts, so a reported median
is always one of the observed values.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import EmptyGroup, MopiError, as_rng
from .datagen import GeneratorSpec, UnsupportedKind, conditional_law, generate, sample_covariates
from .sets import AbsResidualScore, Box, Ellipsoid, MahalanobisScore, NormalizedMaxScore, Sublevel

log = logging.getLogger(__name__)


class AllBinsEmpty(MopiError, ValueError):
    pass


class DegenerateBalls(MopiError, RuntimeError):
    pass


class ZeroWeightMass(MopiError, ValueError):
    pass


def lower_median(v) -> float:
    v = np.sort(np.asarray(v, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("median of an empty array")
    return float(v[(v.size - 1) // 2])


def covered(rule, data) -> np.ndarray:
    return np.asarray(rule.contains(data.X, data.Y), dtype=bool)


def marginal_coverage(rule, test) -> float:
    return float(covered(rule, test).mean())


@dataclass
class BinnedReport:
    value: float
    miscoverage: np.ndarray
    counts: np.ndarray
    dropped: int


def binned_miscoverage(cover, x, bins=100, value_range=None) -> BinnedReport:
    x = np.asarray(x, dtype=float)
    lo, hi = (x.min(), x.max()) if value_range is None else value_range
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
    inside = (x >= lo) & (x <= hi)
    counts = np.bincount(idx[inside], minlength=bins)
    miss = np.bincount(idx[inside], weights=~cover[inside], minlength=bins)
    keep = counts > 0
    if not keep.any():
        raise AllBinsEmpty("no test point falls in any bin")
    return BinnedReport(np.nan, miss[keep] / counts[keep], counts[keep], int((~keep).sum()))


def root_msce_binned(rule, test, alpha: float, bins: int = 100, *, coordinate: int = 0,
                     value_range=None, report: bool = False):
    """sqrt of the mean over equidistant bins of X[:, coordinate] of
    (bin miscoverage - alpha)^2; empty bins are dropped."""
    rep = binned_miscoverage(covered(rule, test), test.X[:, coordinate], bins, value_range)
    if rep.dropped:
        log.info("root_msce_binned: dropped %d empty bins", rep.dropped)
    rep.value = float(np.sqrt(np.mean((rep.miscoverage - alpha) ** 2)))
    return rep if report else rep.value


def _levels(test):
    if test.z_kind != "categorical":
        raise TypeError("per-level metrics need categorical Z")
    return np.unique(test.Z)


def coverage_by_level(rule, test) -> dict:
    cov = covered(rule, test)
    return {int(z): float(cov[test.Z == z].mean()) for z in _levels(test)}


def root_msce_levels(rule, test, alpha: float) -> float:
    """sqrt of the unweighted mean over Z levels of (miscoverage_z - alpha)^2."""
    cov = coverage_by_level(rule, test)
    return float(np.sqrt(np.mean([(1.0 - c - alpha) ** 2 for c in cov.values()])))


def group_coverage(rule, test, scheme=None) -> dict:
    """Coverage per group (overlapping groups share points) or per Z level."""
    if scheme is None:
        return coverage_by_level(rule, test)
    cov = covered(rule, test)
    M = scheme.memberships(test.X)
    out = {}
    for k, label in enumerate(scheme.labels):
        sel = M[:, k]
        if not sel.any():
            raise EmptyGroup(f"group {label!r} has no test points")
        out[label] = float(cov[sel].mean())
    return out


def worst_case_ball_coverage(rule, test, rng, *, n_balls: int = 50, radius=None,
                             max_retries: int = 100) -> float:
    """Minimum coverage over balls in X centred at random test points.

    ``radius=None`` uses U(0.1, 0.25) radii for scalar X and sqrt(2 d_X)
    otherwise. Centres are drawn without replacement when ``n_balls`` does
    not exceed the test size.
    """
    rng = as_rng(rng)
    X = test.X
    n, d = X.shape
    cov = covered(rule, test)
    replace = n_balls > n
    worst = 1.0
    for attempt in range(max_retries):
        centres = rng.choice(n, size=n_balls, replace=replace)
        if radius is None:
            radii = rng.uniform(0.1, 0.25, size=n_balls) if d == 1 else np.full(n_balls, math.sqrt(2 * d))
        else:
            radii = np.full(n_balls, float(radius))
        worst, ok = 1.0, True
        for c, r in zip(centres, radii):
            inside = np.sum((X - X[c]) ** 2, axis=1) <= r * r
            if not inside.any():
                ok = False
                break
            worst = min(worst, float(cov[inside].mean()))
        if ok:
            return worst
    raise DegenerateBalls(f"could not place {n_balls} non-empty balls in {max_retries} attempts")


def linear_reweighting_coverage(rule, test, w) -> float:
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if not w.sum() > 0:
        raise ZeroWeightMass("weights sum to zero")
    return float(np.sum(w * covered(rule, test)) / w.sum())


def set_size_summary(rule, test) -> dict:
    lv = rule.log_volume(test.X)
    return {"median_volume": float(math.exp(lower_median(lv))), "median_log_volume": lower_median(lv)}


# --------------------------------------------------------------------------
# exact MSCE against the generating law

def interval_of(rule, X):
    """(lo, hi) of the set at each row for scalar-label rules, or None when
    the set is not an interval we can read off in closed form."""
    fam = rule.family
    H = rule.shape_values(X)
    if getattr(fam, "d_y", 1) != 1:
        return None
    if isinstance(fam, Sublevel):
        sc, h = fam.score, H[:, 0]
        mu = sc.mean.predict(X)[:, 0]
        if isinstance(sc, AbsResidualScore):
            half = h
        elif isinstance(sc, NormalizedMaxScore):
            half = h * sc.scales.predict(X)[:, 0]
        elif isinstance(sc, MahalanobisScore):
            c = np.abs(sc.whitener.whiten(X, np.ones((X.shape[0], 1)))[:, 0])
            half = np.sqrt(np.maximum(h, 0.0)) / c
        else:
            return None
    elif isinstance(fam, Box):
        mu = fam.mean.predict(X)[:, 0]
        half = fam.scales.predict(X)[:, 0] * np.exp(H[:, 0])
    elif isinstance(fam, Ellipsoid):
        mu = fam.mean.predict(X)[:, 0]
        c = np.abs(fam.whitener.whiten(X, np.ones((X.shape[0], 1)))[:, 0])
        half = 1.0 / (fam.cholesky(H)[:, 0, 0] * c)
    else:
        return None
    half = np.where(half < 0, np.nan, half)  # negative threshold: empty set
    return mu - half, mu + half


def conditional_miscoverage_exact(rule, spec, X, Z=None, *, rng=0, n_inner: int = 10_000):
    """P(Y not in C(X_i) | X_i, Z_i) per row: exact for intervals, otherwise
    Monte Carlo with ``n_inner`` draws per row."""
    law = conditional_law(spec, X, Z)
    iv = interval_of(rule, X)
    if iv is not None:
        lo, hi = iv
        p = 1.0 - law.interval_probability(lo, hi)
        return np.where(np.isnan(p), 1.0, p)
    rng = as_rng(rng)
    out = np.empty(X.shape[0])
    chunk = max(1, 200_000 // n_inner)
    for s in range(0, X.shape[0], chunk):
        sl = slice(s, s + chunk)
        sub = type(law)(law.mean[sl], law.cov[sl])
        Ys = sub.sample(rng, n_inner)
        k = Ys.shape[0]
        Xr = np.repeat(X[sl], n_inner, axis=0)
        inside = rule.contains(Xr, Ys.reshape(k * n_inner, -1)).reshape(k, n_inner)
        out[sl] = 1.0 - inside.mean(axis=1)
    return out


@dataclass
class ExactMsce:
    value: float
    mc_error: float

    def __float__(self):
        return self.value


def exact_msce(rule, spec: GeneratorSpec, alpha: float, *, n_outer: int = 20_000, seed: int = 2**32 - 1,
               x1_grid: int | None = None, n_inner: int = 10_000) -> ExactMsce:
    """E[(alpha(Z; C) - alpha)^2] under the generating law of ``spec``.

    The conditioning variable is the spec's Z (X itself for test-conditional
    kinds, codes for equalized or grouped kinds). ``x1_grid=K`` instead
    conditions on X_1 alone, integrating the other covariates out over
    ``n_outer`` draws at each of K midpoint nodes on [0, 5].
    """
    if not isinstance(spec, GeneratorSpec):
        raise UnsupportedKind("exact MSCE needs a synthetic generator")
    rng = as_rng(seed)
    if x1_grid is not None:
        K = int(x1_grid)
        nodes = (np.arange(K) + 0.5) * 5.0 / K
        base = sample_covariates(spec, n_outer, rng.child(0))
        means, errs = np.empty(K), np.empty(K)
        for k, x1 in enumerate(nodes):
            Xk = base.copy()
            Xk[:, 0] = x1
            p = conditional_miscoverage_exact(rule, spec, Xk, rng=rng.child(1, k), n_inner=n_inner)
            means[k], errs[k] = p.mean(), p.var() / n_outer
        dev = means - alpha
        value = float(np.mean(dev**2))
        err = float(np.sqrt(np.mean(4 * dev**2 * errs)) + np.mean(errs))
        return ExactMsce(value, err)

    data = generate(spec.with_(n=n_outer, seed=seed % 2**63))
    latent = data.Z if spec.kind.startswith("Equalized") else None
    p = conditional_miscoverage_exact(rule, spec, data.X, latent, rng=rng.child(1), n_inner=n_inner)
    if data.z_kind != "categorical":
        sq = (p - alpha) ** 2
        return ExactMsce(float(sq.mean()), float(sq.std() / math.sqrt(sq.size)))
    value, var_delta, bias = 0.0, 0.0, 0.0
    for z in np.unique(data.Z):
        sel = data.Z == z
        w, pz = sel.mean(), p[sel]
        dev = pz.mean() - alpha
        value += w * dev**2
        var_z = pz.var() / sel.sum()
        var_delta += (2 * w * dev) ** 2 * var_z
        bias += w * var_z
    return ExactMsce(float(value), float(math.sqrt(var_delta) + bias))


# --------------------------------------------------------------------------
# bundle used by the experiment harness

def evaluate_rule(rule, test, alpha: float, metrics, *, rng=0, scheme=None, bins: int = 100) -> dict:
    """Compute the named metrics; per-group metrics expand to one entry each."""
    out = {}
    for name in metrics:
        if name == "marginal":
            out[name] = marginal_coverage(rule, test)
        elif name == "sqrt_msce_binned":
            out[name] = root_msce_binned(rule, test, alpha, bins)
        elif name == "sqrt_msce_z":
            out[name] = root_msce_levels(rule, test, alpha)
        elif name == "worst_case":
            out[name] = worst_case_ball_coverage(rule, test, as_rng(rng).child(17))
        elif name == "coverage_z":
            cov = coverage_by_level(rule, test)
            out.update({f"coverage_z={z}": c for z, c in cov.items()})
            out["max_gap_z"] = max(abs(c - (1 - alpha)) for c in cov.values())
        elif name == "coverage_group":
            cov = group_coverage(rule, test, scheme)
            out.update({f"coverage_group={k}": c for k, c in cov.items()})
        elif name == "set_size":
            s = set_size_summary(rule, test)
            out.update(s)
        else:
            raise ValueError(f"unknown metric {name!r}")
    return out
