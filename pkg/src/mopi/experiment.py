"""Config-driven experiment pipeline: generate, pretrain, calibrate, evaluate.

A config is one JSON document (see :data:`DEFAULTS`). Replication ``r`` is
driven entirely by ``seed = base_seed + r``; the pretraining, calibration
and test draws, anchor choices and metric randomness all come from streams
derived from that seed, so any replication can be rerun alone.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import fit_cc, fit_scp
from .core import Dataset, MopiError, split_dataset
from .datagen import GeneratorSpec, GroupScheme, generate, ingest_csv
from .metrics import evaluate_rule, root_msce_binned, root_msce_levels
from .pretrain import (fit_ellipsoid_shape_init, fit_global_covariance, fit_knn_mean, fit_nll_covariance_net, fit_ridge_mean,
                       fit_scales)
from .sets import (AbsResidualScore, Box, Ellipsoid, MahalanobisScore, NormalizedMaxScore, Sublevel,
                   Surrogate)
from .shapes import init_shape
from .solver import AdamConfig, SolverConfig, fit_mopi
from .weights import GaussianRKHS, IndicatorBasis

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORKERS_ENV = "MOPI_WORKERS"
RESULT_COLUMNS = ("config_hash", "replication", "seed", "method", "setting", "x", "metric", "value")
SUBSTITUTION_NOTE = "nonparametric mean maps use k-NN in place of random forests"

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "setting": None,
    "generator": {"kind": "Hetero1x", "d_x": 6, "d_y": 2, "rho": 1.0, "groups": None},
    "data": None,
    "sizes": {"pretrain": 3000, "calibration": 1500, "test": 5000},
    "alpha": 0.1,
    "replications": 1,
    "base_seed": 0,
    "pretrain": {"mean": "ridge", "ridge": 0.0, "k": 20, "scales": "global", "covariance": "global",
                 "nll": {"width": 16, "iterations": 500, "lr": 0.01}},
    "family": "abs_residual",
    "methods": [{"name": "SCP"}],
    "metrics": ["marginal", "sqrt_msce_binned"],
    "bins": 100,
    "sweep": None,
    "max_failure_rate": 0.1,
    "cv": {"method": "MOPI", "grid": {}, "folds": 2, "replications": 1, "bins": 10, "seed_offset": 100000},
}

METHOD_DEFAULTS = {
    "SCP": {},
    "CC": {"weight": {"kind": "rkhs", "bandwidth": 2.0, "gamma": 1e-3}, "n_anchor": None,
           "solver": {"lr": 0.01, "iterations": 2000}},
    "MOPI": {"weight": {"kind": "rkhs", "bandwidth": 2.0, "gamma": 3e-3}, "weight_on": "z",
             "shape": {"kind": "rkhs", "bandwidth": 2.0, "n_anchor": 200},
             "solver": {"surrogate": {"kind": "sigmoid", "r": 0.1}, "lr": 0.02, "iterations": 2000,
                        "lam": 1.0, "nu": 0.0}},
}


class ExperimentFailed(MopiError, RuntimeError):
    pass


class ConfigHashMismatch(MopiError, ValueError):
    pass


class UnknownFigureKind(MopiError, ValueError):
    pass


# --------------------------------------------------------------------------
# config handling

def deep_merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def normalize_config(cfg: dict) -> dict:
    cfg = deep_merge(DEFAULTS, cfg)
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ValueError(f"unsupported config schema version {cfg['schema_version']}")
    cfg["methods"] = [deep_merge(METHOD_DEFAULTS[m["name"]], m) for m in cfg["methods"]]
    if cfg["setting"] is None:
        cfg["setting"] = cfg["generator"]["kind"] if cfg["data"] is None else "csv"
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(normalize_config(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _method_label(m):
    return m.get("label", m["name"])


def _resolve(node, key):
    if isinstance(node, list):
        if key.lstrip("-").isdigit():
            return int(key)
        for i, m in enumerate(node):
            if isinstance(m, dict) and key in (m.get("label"), m.get("name")):
                return i
        raise KeyError(f"no list entry named {key!r}")
    return key


def set_path(cfg: dict, path: str, value) -> dict:
    """Set a dotted path; list entries are addressed by index or method label."""
    keys = path.split(".")
    node = cfg
    for k in keys[:-1]:
        k = _resolve(node, k)
        if isinstance(node, dict) and k not in node:
            node[k] = {}
        node = node[k]
    node[_resolve(node, keys[-1])] = value
    return cfg


def get_path(cfg: dict, path: str):
    node = cfg
    for k in path.split("."):
        node = node[_resolve(node, k)]
    return node


def parse_override(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


# --------------------------------------------------------------------------
# pipeline pieces

def generator_spec(cfg, n, seed) -> GeneratorSpec:
    g = cfg["generator"]
    return GeneratorSpec(g["kind"], int(n), seed, d_y=g.get("d_y", 2), d_x=g.get("d_x", 6),
                         rho=g.get("rho", 1.0), groups=g.get("groups"))


def scheme_of(cfg):
    name = cfg["generator"].get("groups") if cfg["data"] is None else None
    return GroupScheme(name) if name else None


def draw_splits(cfg, seed):
    """(pretrain, calibration, test) for one replication seed."""
    s = cfg["sizes"]
    if cfg["data"] is not None:
        d = cfg["data"]
        pool = ingest_csv(d["csv"], d["schema"], role="test")
        return split_dataset(pool, d["fractions"], derive_seed(seed, 0))
    out = []
    for k, (role, n) in enumerate((("pretrain", s["pretrain"]), ("calibration", s["calibration"]), ("test", s["test"]))):
        out.append(generate(generator_spec(cfg, n, derive_seed(seed, 1, k)), role))
    return tuple(out)


def pretrain_components(cfg, pre, seed) -> dict:
    p = cfg["pretrain"]
    if p["mean"] == "ridge":
        mean = fit_ridge_mean(pre, p["ridge"])
    elif p["mean"] == "knn":
        mean = fit_knn_mean(pre, int(p["k"]))
    else:
        raise ValueError(f"unknown mean model {p['mean']!r}")
    comps = {"mean": mean}
    fam = cfg["family"]
    if fam in ("normalized_max", "box"):
        grouping = None if p["scales"] == "global" else GroupScheme(p["scales"])
        comps["scales"] = fit_scales(pre, mean, grouping)
    if fam in ("mahalanobis", "ellipsoid"):
        if p["covariance"] == "global":
            comps["whitener"] = fit_global_covariance(pre, mean)
        elif p["covariance"] == "nll":
            nll = p["nll"]
            comps["whitener"] = fit_nll_covariance_net(pre, mean, width=nll["width"], iterations=nll["iterations"],
                                                       lr=nll["lr"], seed=derive_seed(seed, 2))
        else:
            raise ValueError(f"unknown covariance model {p['covariance']!r}")
    return comps


def build_families(cfg, comps, d_y):
    """(family for MOPI, sublevel family for the baselines)."""
    fam = cfg["family"]
    if fam == "abs_residual":
        f = Sublevel(AbsResidualScore(comps["mean"]), d_y)
        return f, f
    if fam == "mahalanobis":
        f = Sublevel(MahalanobisScore(comps["mean"], comps["whitener"]), d_y)
        return f, f
    if fam == "normalized_max":
        f = Sublevel(NormalizedMaxScore(comps["mean"], comps["scales"]), d_y)
        return f, f
    if fam == "box":
        return Box(comps["mean"], comps["scales"], d_y), Sublevel(NormalizedMaxScore(comps["mean"], comps["scales"]), d_y)
    if fam == "ellipsoid":
        return (Ellipsoid(comps["mean"], comps["whitener"], d_y),
                Sublevel(MahalanobisScore(comps["mean"], comps["whitener"]), d_y))
    raise ValueError(f"unknown family {fam!r}")


def _weight(wcfg):
    if wcfg["kind"] == "indicator":
        return IndicatorBasis(tuple(wcfg.get("levels", ())))
    return GaussianRKHS(float(wcfg["bandwidth"]), float(wcfg["gamma"]))


def solver_config(scfg, seed) -> SolverConfig:
    sur = scfg.get("surrogate")
    surrogate = Surrogate(sur.get("kind", "erf"), float(sur.get("r", 0.1))) if sur else Surrogate()
    return SolverConfig(surrogate=surrogate, optimizer=AdamConfig(lr=float(scfg.get("lr", 1e-2))),
                        iterations=int(scfg.get("iterations", 2000)), nu=float(scfg.get("nu", 0.0)),
                        lam=float(scfg.get("lam", 1.0)), seed=int(seed))


def cell_quantiles(shape, scores, X, level, fallback, min_count=10):
    idx = shape.cell_index(X)
    table = np.full(len(shape.levels) + 1, float(fallback))
    for k in range(len(shape.levels)):
        s = scores[idx == k]
        if s.size >= min_count:
            table[k] = np.quantile(s, level)
    return table


def fit_method(mcfg, cfg, mopi_family, base_family, pre, cal, seed, chash=""):
    alpha = float(cfg["alpha"])
    name = mcfg["name"]
    scheme = scheme_of(cfg)
    if name == "SCP":
        return fit_scp(base_family, cal, alpha, config_hash=chash)
    if name == "CC":
        weight = _weight(mcfg["weight"])
        rule, _ = fit_cc(base_family, weight, cal, alpha, solver_config(mcfg["solver"], seed), partition=scheme,
                         n_anchor=mcfg.get("n_anchor"), config_hash=chash)
        return rule
    if name != "MOPI":
        raise ValueError(f"unknown method {name!r}")
    weight = _weight(mcfg["weight"])
    if isinstance(weight, GaussianRKHS):
        if mcfg.get("weight_on", "z") == "x":
            cal = cal.with_z(cal.X, "real")
        elif cal.z_kind == "categorical":
            cal = cal.with_z(cal.Z.astype(float)[:, None], "real")
    elif cal.z_kind != "categorical":
        raise ValueError("the indicator weight class needs categorical Z")
    scfg = mcfg["shape"]
    m = mopi_family.shape_dim
    if isinstance(mopi_family, Sublevel):
        neutral = float(np.quantile(mopi_family.score(pre.X, pre.Y), 1.0 - alpha))
    else:
        neutral = 0.0
    kw = {k: v for k, v in scfg.items() if k not in ("kind", "init", "nll_iterations", "nll_lr")}
    if scfg.get("init") == "nll":
        if not (isinstance(mopi_family, Ellipsoid) and scfg["kind"] == "mlp"):
            raise ValueError("the nll warm start applies to mlp shapes on the ellipsoid family")
        whitener, net = fit_ellipsoid_shape_init(
            pre, mopi_family, alpha, width=int(scfg.get("width", 16)),
            iterations=int(scfg.get("nll_iterations", 1000)), lr=float(scfg.get("nll_lr", 1e-2)),
            seed=derive_seed(seed, 2))
        mopi_family = Ellipsoid(mopi_family.mean, whitener, mopi_family.d_y)
        rule, _ = fit_mopi(mopi_family, net, weight, cal, alpha, solver_config(mcfg["solver"], seed),
                           config_hash=chash)
        return rule
    if scfg["kind"] == "indicator":
        if scheme is None:
            raise ValueError("an indicator shape needs generator groups")
        kw["partition"] = scheme
    shape = init_shape(scfg["kind"], m, neutral=neutral, rng=derive_seed(seed, 3), X=cal.X, **kw)
    if scfg["kind"] == "indicator" and isinstance(mopi_family, Sublevel):
        # per-cell pretrain quantiles: with a sharp surrogate a cell started
        # far from its own scores has a vanishing gradient and never moves
        shape = shape.with_params(cell_quantiles(shape, mopi_family.score(pre.X, pre.Y), pre.X, 1.0 - alpha, neutral))
    rule, _ = fit_mopi(mopi_family, shape, weight, cal, alpha, solver_config(mcfg["solver"], seed), config_hash=chash)
    return rule


def run_replication(cfg: dict, r: int, chash: str = "") -> list:
    """Rows (replication, seed, method, metric, value) for one replication;
    the sweep value column is filled in by the caller."""
    seed = int(cfg["base_seed"]) + int(r)
    pre, cal, test = draw_splits(cfg, seed)
    comps = pretrain_components(cfg, pre, seed)
    mopi_family, base_family = build_families(cfg, comps, test.d_y)
    rows = []
    for j, mcfg in enumerate(cfg["methods"]):
        rule = fit_method(mcfg, cfg, mopi_family, base_family, pre, cal, derive_seed(seed, 4, j), chash)
        vals = evaluate_rule(rule, test, float(cfg["alpha"]), cfg["metrics"], rng=derive_seed(seed, 5),
                             scheme=scheme_of(cfg), bins=int(cfg["bins"]))
        rows += [(r, seed, _method_label(mcfg), k, v) for k, v in vals.items()]
    return rows


def _replication_job(args):
    cfg, r, chash = args
    try:
        return run_replication(cfg, r, chash), None
    except (MopiError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _map_ordered(jobs):
    n = _workers()
    if n == 1 or len(jobs) == 1:
        return [_replication_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(_replication_job, jobs))  # map keeps submission order


def fmt_float(v) -> str:
    return "%.17g" % v


def _fmt_x(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return fmt_float(x)
    return str(x)


@dataclass
class ExperimentResult:
    config_hash: str
    rows: list
    summary: dict
    failures: list = field(default_factory=list)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for row in self.rows:
            w.writerow(row)
        return buf.getvalue()

    def frame(self, method=None, metric=None, x=None):
        """Values of matching rows, in replication order."""
        out = []
        for row in self.rows:
            if method is not None and row[3] != method:
                continue
            if metric is not None and row[6] != metric:
                continue
            if x is not None and row[5] != _fmt_x(x):
                continue
            out.append(float(row[7]))
        return np.array(out)


def summarize(rows, chash, cfg, failures) -> dict:
    cells = {}
    for row in rows:
        cells.setdefault((row[3], row[4], row[5], row[6]), []).append(float(row[7]))
    out = []
    for (method, setting, x, metric), v in cells.items():
        v = np.array(v)
        sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
        out.append({"method": method, "setting": setting, "x": x, "metric": metric, "n": int(v.size),
                    "mean": float(v.mean()), "sd": sd, "se": sd / math.sqrt(v.size)})
    meta = {"substitutions": [SUBSTITUTION_NOTE] if cfg["pretrain"]["mean"] == "knn" else []}
    return {"config_hash": chash, "schema_version": SCHEMA_VERSION, "cells": out,
            "failed_replications": failures, "metadata": meta}


def run_experiment(config: dict, out_dir=None, *, stem: str = "results") -> ExperimentResult:
    """Run every replication (and sweep value); optionally write
    ``<stem>.csv`` and ``<stem>.summary.json`` into ``out_dir``."""
    cfg = normalize_config(config)
    chash = config_hash(cfg)
    sweep = cfg["sweep"]
    points = [(None, cfg)] if not sweep else [(v, set_path(copy.deepcopy(cfg), sweep["path"], v)) for v in sweep["values"]]
    R = int(cfg["replications"])
    rows, failures = [], []
    for x, c in points:
        c = normalize_config(c)
        results = _map_ordered([(c, r, chash) for r in range(R)])
        for r, (res, err) in enumerate(results):
            if err is not None:
                log.warning("replication %d (x=%s) failed: %s", r, x, err)
                failures.append({"replication": r, "x": _fmt_x(x), "error": err})
                continue
            for rep, seed, method, metric, value in res:
                rows.append((chash, rep, seed, method, cfg["setting"], _fmt_x(x), metric, fmt_float(value)))
    total = R * len(points)
    if len(failures) > cfg["max_failure_rate"] * total:
        raise ExperimentFailed(f"{len(failures)} of {total} replications failed: {failures[:3]}")
    result = ExperimentResult(chash, rows, summarize(rows, chash, cfg, failures), failures)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, f"{stem}.csv"), "w", newline="") as fh:
            fh.write(result.csv_text())
        with open(os.path.join(out_dir, f"{stem}.summary.json"), "w") as fh:
            json.dump(result.summary, fh, indent=1, sort_keys=True)
    return result


# --------------------------------------------------------------------------
# cross-validation

@dataclass
class CvResult:
    chosen: dict
    scores: list


def cross_validate(config: dict, grid: dict | None = None, *, folds: int | None = None) -> CvResult:
    """Pick method hyperparameters by K-fold CV on the calibration split.

    ``grid`` maps dotted paths inside the tuned method's config (e.g.
    ``shape.bandwidth``) to candidate lists. The objective is binned
    sqrt-MSCE on the held-out fold for real Z and the per-level sqrt-MSCE
    for categorical Z, averaged over folds and CV replications. Ties go to
    the lexicographically smallest grid point.
    """
    cfg = normalize_config(config)
    cv = cfg["cv"]
    grid = grid if grid is not None else cv["grid"]
    folds = int(folds or cv["folds"])
    if folds < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("the grid must be non-empty")
    keys = sorted(grid)
    points = list(itertools.product(*(grid[k] for k in keys)))
    midx = _resolve(cfg["methods"], cv["method"])
    alpha = float(cfg["alpha"])
    totals = np.zeros(len(points))
    for rep in range(int(cv["replications"])):
        seed = int(cfg["base_seed"]) + int(cv["seed_offset"]) + rep
        pre, cal, _ = draw_splits(cfg, seed)
        comps = pretrain_components(cfg, pre, seed)
        mopi_family, base_family = build_families(cfg, comps, cal.d_y)
        perm = np.random.Generator(np.random.Philox(derive_seed(seed, 6))).permutation(cal.n)
        parts = np.array_split(perm, folds)
        for p, point in enumerate(points):
            mcfg = copy.deepcopy(cfg["methods"][midx])
            for k, v in zip(keys, point):
                set_path(mcfg, k, v)
            for f in range(folds):
                train_idx = np.sort(np.concatenate([parts[g] for g in range(folds) if g != f]))
                train = cal.subset(train_idx, "calibration")
                hold = cal.subset(np.sort(parts[f]), "test")
                rule = fit_method(mcfg, cfg, mopi_family, base_family, pre, train, derive_seed(seed, 7, f))
                if hold.z_kind == "categorical":
                    totals[p] += root_msce_levels(rule, hold, alpha)
                else:
                    totals[p] += root_msce_binned(rule, hold, alpha, int(cv["bins"]))
    means = totals / (folds * int(cv["replications"]))
    best = min(range(len(points)), key=lambda i: (round(means[i], 12), points[i]))
    scores = [{"point": dict(zip(keys, pt)), "objective": float(m)} for pt, m in zip(points, means)]
    return CvResult(dict(zip(keys, points[best])), scores)


# --------------------------------------------------------------------------
# plot data

FIGURE_KINDS = {
    "coverage-vs-n": "marginal",
    "metric-vs-r": "sqrt_msce_binned",
    "metric-vs-rho": "sqrt_msce_z",
    "group-bars": None,
}


def read_results(paths) -> list:
    rows = []
    for path in ([paths] if isinstance(paths, (str, os.PathLike)) else paths):
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if tuple(header) != RESULT_COLUMNS:
                raise ValueError(f"{path} is not a results file")
            rows += [tuple(r) for r in rd]
    return rows


def emit_plotdata(results, kind: str, *, metric: str | None = None, expected_hash: str | None = None) -> str:
    """Long-format CSV ``x,series,mean,sd`` for one figure kind.

    ``results`` is a results CSV path (or list of paths). Rows from more
    than one config hash, or not matching ``expected_hash``, are rejected.
    The first line is a ``# config_hash=`` comment.
    """
    if kind not in FIGURE_KINDS:
        raise UnknownFigureKind(f"unknown figure kind {kind!r}; choose from {sorted(FIGURE_KINDS)}")
    rows = read_results(results)
    hashes = sorted({r[0] for r in rows})
    if len(hashes) > 1:
        raise ConfigHashMismatch(f"results mix config hashes {hashes}")
    if expected_hash is not None and hashes and hashes[0] != expected_hash:
        raise ConfigHashMismatch(f"results carry config hash {hashes[0]}, expected {expected_hash}")
    series = {}
    if kind == "group-bars":
        for r in rows:
            if r[6].startswith(("coverage_group=", "coverage_z=")):
                series.setdefault((r[3], r[6].split("=", 1)[1]), []).append(float(r[7]))
    else:
        target = metric or FIGURE_KINDS[kind]
        for r in rows:
            if r[6] == target:
                series.setdefault((r[3], r[5]), []).append(float(r[7]))
    buf = io.StringIO()
    buf.write(f"# config_hash={hashes[0] if hashes else ''}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("x", "series", "mean", "sd"))
    for (method, x), v in series.items():
        v = np.array(v)
        sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
        w.writerow((x, method, fmt_float(float(v.mean())), fmt_float(sd)))
    return buf.getvalue()
