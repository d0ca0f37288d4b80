"""Seeded synthetic generators, group schemes, oracle conditionals and CSV I/O.

Generator kinds
---------------
``MultiLabel51``     X ~ U(0, 5), Y | X ~ N(mu*(X), Sigma*(X)) in d_Y dims, Z = X
``Equalized1``       11 covariates, sensitive Z = 1{X_1 <= 2.5}
``Equalized1Prime``  as above with Z = 1{rho X_1 + (1 - rho) V <= 2.5 rho}
``Equalized2``       Z | X ~ softmax(X^T gamma_z), Y | X, Z Gaussian
``Hetero1x/2x/3x``   Y = sum_j X_j / sqrt(d) + e(X), Z = X (or group codes)

In every kind X_1 ~ U(0, 5) and the remaining covariates are N(0, 1).
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .core import Dataset, MopiError, SeededRng

KINDS = ("MultiLabel51", "Equalized1", "Equalized1Prime", "Equalized2", "Hetero1x", "Hetero2x", "Hetero3x")


class UnsupportedKind(MopiError, ValueError):
    pass


class ParseError(MopiError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row, self.column = row, column


class SchemaError(MopiError, ValueError):
    pass


# Setting 2 constants: one draw with numpy default_rng(SeedSequence(7301)) in
# the order a, delta, gamma ~ U[-1, 1]^(4 x 11), then c ~ U[0.5, 1.5]^4.
EQ2_SEED = 7301
EQ2_A = np.array([
    [0.952878, 0.345968, 0.812276, -0.331803, -0.213631, 0.940145, -0.462781, 0.085095, 0.263325, -0.727292, 0.628471],
    [0.230414, 0.233555, 0.233804, 0.201093, -0.546588, 0.377796, -0.515760, -0.718307, 0.852658, 0.486670, 0.668874],
    [0.889486, 0.463096, 0.182973, 0.814060, -0.416635, -0.774263, 0.948260, 0.738690, -0.660953, 0.072914, 0.975970],
    [-0.982762, -0.963943, 0.545699, -0.794682, -0.457795, 0.171997, -0.654317, 0.575864, -0.871430, 0.584205, 0.322321],
])
EQ2_DELTA = np.array([
    [-0.701031, 0.680969, 0.277587, -0.501888, 0.995559, 0.734152, -0.051474, 0.909081, -0.183050, -0.875162, -0.811757],
    [-0.034006, -0.855481, 0.845940, 0.124388, 0.536361, 0.594375, 0.545566, 0.313284, -0.364891, 0.186558, -0.019193],
    [-0.393806, 0.447674, -0.870656, -0.374291, 0.562438, -0.144847, 0.032246, 0.179560, -0.706664, -0.279622, 0.744707],
    [0.551249, 0.767018, -0.701698, 0.327113, 0.734510, 0.017554, -0.079797, 0.589487, -0.110530, 0.712329, -0.298422],
])
EQ2_GAMMA = np.array([
    [0.324888, 0.295722, 0.541520, 0.405488, -0.838685, -0.284966, 0.754595, 0.224195, 0.302645, -0.987194, 0.690618],
    [-0.921801, 0.498276, -0.849643, -0.025896, -0.537318, 0.885159, 0.059323, -0.183597, -0.851511, -0.411740, 0.371342],
    [0.154509, -0.647482, 0.970551, -0.121684, -0.617926, 0.933935, -0.922763, 0.903116, -0.803709, -0.873700, 0.676470],
    [-0.133075, -0.010818, 0.488387, -0.098164, 0.281419, 0.917783, -0.903071, 0.274489, 0.874067, 0.703023, -0.811598],
])
EQ2_C = np.array([0.719948, 0.654936, 0.998515, 1.109348])


# --------------------------------------------------------------------------
# groups

def _interval_predicates():
    return [(f"[{k - 1},{k})", lambda X, k=k: (X[:, 0] >= k - 1) & (X[:, 0] < k)) for k in range(1, 6)]


def _complex_predicates():
    def col(X, j):
        return X[:, j - 1]

    return [
        ("x1+x6>=3", lambda X: col(X, 1) + col(X, 6) >= 3),
        ("sin(x5)+x1^2>=3.5", lambda X: np.sin(col(X, 5)) + col(X, 1) ** 2 >= 3.5),
        ("|x2|+3|x4|+|x6|+2|x3|<=3sqrt(x1)", lambda X: np.abs(col(X, 2)) + 3 * np.abs(col(X, 4))
         + np.abs(col(X, 6)) + 2 * np.abs(col(X, 3)) <= 3 * np.sqrt(np.maximum(col(X, 1), 0.0))),
        ("4x3^2+x5^2+2x2^2-x1^2<=x1", lambda X: 4 * col(X, 3) ** 2 + col(X, 5) ** 2 + 2 * col(X, 2) ** 2
         - col(X, 1) ** 2 <= col(X, 1)),
    ]


class GroupScheme:
    """Named predicates over X; the Z code of x is its membership bit-vector
    read as an integer (bit k set iff x is in group k)."""

    SCHEMES = {"Interval1D": _interval_predicates, "ComplexOverlap": _complex_predicates}

    def __init__(self, name: str):
        if name not in self.SCHEMES:
            raise ValueError(f"unknown group scheme {name!r}")
        self.name = name
        self.predicates = self.SCHEMES[name]()

    @property
    def n_groups(self):
        return len(self.predicates)

    @property
    def labels(self):
        return [p[0] for p in self.predicates]

    def memberships(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.column_stack([fn(X) for _, fn in self.predicates])

    def codes(self, X) -> np.ndarray:
        M = self.memberships(X).astype(np.int64)
        return M @ (1 << np.arange(self.n_groups, dtype=np.int64))

    def to_dict(self):
        return {"kind": "group_scheme", "name": self.name}

    def __repr__(self):
        return f"GroupScheme({self.name!r})"


def partition_from_dict(d):
    if d.get("kind") == "group_scheme":
        return GroupScheme(d["name"])
    raise ValueError(f"unknown partition {d!r}")


# --------------------------------------------------------------------------
# generators

@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    n: int
    seed: int = 0
    d_y: int = 2
    d_x: int = 6
    rho: float = 1.0
    groups: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnsupportedKind(f"unknown generator kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.kind == "MultiLabel51" and self.d_y not in (2, 4, 6):
            raise ValueError("MultiLabel51 supports d_y in {2, 4, 6}")
        if self.kind.startswith("Hetero") and self.d_x not in (6, 11):
            raise ValueError("Hetero kinds support d_x in {6, 11}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")

    @property
    def dim_x(self) -> int:
        if self.kind == "MultiLabel51":
            return 1
        if self.kind.startswith("Equalized"):
            return 11
        return self.d_x

    @property
    def dim_y(self) -> int:
        return self.d_y if self.kind == "MultiLabel51" else 1

    def with_(self, **kw) -> "GeneratorSpec":
        return GeneratorSpec(**{**asdict(self), **kw})

    def to_dict(self):
        return asdict(self)


def sample_covariates(spec: GeneratorSpec, n: int, rng) -> np.ndarray:
    d = spec.dim_x
    X = np.empty((n, d))
    X[:, 0] = rng.uniform(0.0, 5.0, size=n)
    if d > 1:
        X[:, 1:] = rng.standard_normal((n, d - 1))
    return X


def mixture_weights(X) -> np.ndarray:
    """Softmax Setting 2 membership probabilities, (n, 4)."""
    logits = np.atleast_2d(X) @ EQ2_GAMMA.T
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def _sample_z(spec, X, rng):
    if spec.kind == "Equalized1":
        return (X[:, 0] <= 2.5).astype(np.int64)
    if spec.kind == "Equalized1Prime":
        V = rng.standard_normal(X.shape[0])
        return (spec.rho * X[:, 0] + (1.0 - spec.rho) * V <= 2.5 * spec.rho).astype(np.int64)
    if spec.kind == "Equalized2":
        cum = np.cumsum(mixture_weights(X), axis=1)
        u = rng.uniform(size=X.shape[0])
        return 1 + np.minimum((u[:, None] > cum).sum(axis=1), 3)
    return None


@dataclass
class GaussianLaw:
    """Conditional law of Y given (X, Z) for a batch: means (n, d), covs (n, d, d)."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def std(self) -> np.ndarray:
        """Marginal standard deviations, (n, d)."""
        return np.sqrt(np.diagonal(self.cov, axis1=1, axis2=2))

    def quantile(self, level: float) -> np.ndarray:
        if self.mean.shape[1] != 1:
            raise UnsupportedKind("quantiles are defined for scalar labels only")
        return self.mean[:, 0] + self.std[:, 0] * ndtri(level)

    def interval_probability(self, lo, hi) -> np.ndarray:
        if self.mean.shape[1] != 1:
            raise UnsupportedKind("interval probabilities are defined for scalar labels only")
        m, s = self.mean[:, 0], self.std[:, 0]
        return ndtr((np.asarray(hi) - m) / s) - ndtr((np.asarray(lo) - m) / s)

    def sample(self, rng, size: int) -> np.ndarray:
        """``size`` draws per row, (n, size, d)."""
        L = np.linalg.cholesky(self.cov)
        E = rng.standard_normal((self.mean.shape[0], size, self.mean.shape[1]))
        return self.mean[:, None, :] + np.einsum("nij,nsj->nsi", L, E)


def _hetero_var(kind, X):
    d = X.shape[1]
    if kind == "Hetero1x":
        return 1.0 + X[:, 0] ** 2 + 0.5 * np.sin(X[:, 1:].sum(axis=1))
    if kind == "Hetero2x":
        s = X.sum(axis=1)
        return 1.0 + 0.2 * np.sum(np.sin(X) ** 2, axis=1) + np.sum(X**2, axis=1) * (s > 3)
    return (2.0 - (X[:, 0] < 1.2) + 5.0 * (X[:, 0] > 3) + 2.0 * (X[:, 2] > 0) + 3.0 * (X[:, 4] > 0.5)).astype(float)


def multilabel_moments(X, d_y):
    x = np.atleast_2d(X)[:, 0]
    j = np.arange(1, d_y + 1)
    mean = np.sin(x[:, None] + j) + 0.3 * j
    diag = (0.05 + 1.5 * np.sqrt(j) * np.abs(np.sin(x[:, None] + 2 * j))) ** np.sqrt(j)
    cov = np.zeros((x.size, d_y, d_y))
    idx = np.arange(d_y)
    cov[:, idx, idx] = diag
    off = 0.6 * np.sqrt(diag[:, 0] * diag[:, 1])
    cov[:, 0, 1] = cov[:, 1, 0] = off
    return mean, cov


def conditional_law(spec: GeneratorSpec, X, Z=None) -> GaussianLaw:
    """Exact Gaussian law of Y | X, Z under ``spec`` (batched over rows of X).

    ``Z`` is needed for the equalized kinds whose Z is not a function of X;
    for ``Equalized1`` it is recomputed from X when omitted.
    """
    if not isinstance(spec, GeneratorSpec):
        raise UnsupportedKind("conditional laws exist for synthetic generators only")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != spec.dim_x:
        raise ValueError(f"{spec.kind} has {spec.dim_x} covariates, got {X.shape[1]}")
    k = spec.kind
    if k == "MultiLabel51":
        mean, cov = multilabel_moments(X, spec.d_y)
        return GaussianLaw(mean, cov)
    if k.startswith("Hetero"):
        mean = X.sum(axis=1) / math.sqrt(X.shape[1])
        var = _hetero_var(k, X)
    elif k in ("Equalized1", "Equalized1Prime"):
        if Z is None:
            if k == "Equalized1Prime" and spec.rho < 1:
                raise ValueError("Z is not a function of X here; pass it explicitly")
            Z = (X[:, 0] <= 2.5).astype(float)
        Z = np.asarray(Z, dtype=float).ravel()
        mean = X.sum(axis=1) / math.sqrt(11) + 0.5 * Z
        var = 1.0 + Z**2 + 0.5 * np.sin(X[:, 1:].sum(axis=1))
    else:
        if Z is None:
            raise ValueError("Setting 2 needs the component label Z")
        zi = np.asarray(Z, dtype=np.int64).ravel() - 1
        mean = np.sum(X * EQ2_A[zi], axis=1) + 0.5 * np.sin(X[:, 0]) ** 2
        var = (np.abs(np.sum(X * EQ2_DELTA[zi], axis=1)) + EQ2_C[zi]) ** 2
    return GaussianLaw(mean[:, None], var[:, None, None])


def generate(spec: GeneratorSpec, role: str = "test") -> Dataset:
    """Draw ``spec.n`` i.i.d. samples; identical ``spec`` gives identical data."""
    rng = SeededRng(spec.seed)
    X = sample_covariates(spec, spec.n, rng.child(0))
    Z = _sample_z(spec, X, rng.child(2))
    law = conditional_law(spec, X, Z)
    noise = rng.child(1)
    if spec.dim_y == 1:
        u = noise.uniform(size=spec.n)
        Y = law.mean + law.std * ndtri(u)[:, None]  # inverse-CDF sampling
    else:
        L = np.linalg.cholesky(law.cov)  # raises if any Sigma*(x) is not SPD
        Y = law.mean + np.einsum("nij,nj->ni", L, noise.standard_normal((spec.n, spec.dim_y)))
    if spec.groups is not None:
        return Dataset(X, Y, GroupScheme(spec.groups).codes(X), role, z_kind="categorical")
    if Z is not None:
        return Dataset(X, Y, Z, role, z_kind="categorical")
    return Dataset(X, Y, None, role)


def oracle_rule(spec: GeneratorSpec, alpha: float):
    """Equal-tailed oracle interval mu* +- q sigma* as a prediction rule
    (scalar labels, Z a function of X)."""
    from .sets import AbsResidualScore, PredictionRule, Sublevel

    if spec.dim_y != 1 or spec.kind == "Equalized2" or (spec.kind == "Equalized1Prime" and spec.rho < 1):
        raise UnsupportedKind(f"no X-measurable oracle interval for {spec.kind}")
    q = float(ndtri(1.0 - alpha / 2.0))

    class _Mean:
        def predict(self, X):
            return conditional_law(spec, X).mean

    class _HalfWidth:
        m = 1

        def forward(self, X):
            return q * conditional_law(spec, X).std

    return PredictionRule(Sublevel(AbsResidualScore(_Mean())), _HalfWidth(), "oracle")


# --------------------------------------------------------------------------
# CSV

SCHEMA_ROLES = ("x", "y", "z", "z_cat", "ignore")


def _git_hash():
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def ingest_csv(path, schema: dict, role: str = "calibration") -> Dataset:
    """Read a headed CSV into a Dataset.

    ``schema`` maps every column name to one of ``x``, ``y``, ``z`` (real),
    ``z_cat`` (categorical) or ``ignore``. Categorical values are encoded by
    sorted lexical order, except columns holding only integer literals,
    which keep their integer values.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", row=0)
    header = [h.strip() for h in rows[0]]
    unknown = set(schema) - set(header)
    if unknown:
        raise SchemaError(f"schema names columns not in the file: {sorted(unknown)}")
    missing = [h for h in header if h not in schema]
    if missing:
        raise SchemaError(f"columns without a role: {missing}")
    bad = {h: r for h, r in schema.items() if r not in SCHEMA_ROLES}
    if bad:
        raise SchemaError(f"unknown roles {bad}")
    roles = [schema[h] for h in header]
    if "x" not in roles or "y" not in roles:
        raise SchemaError("schema needs at least one x and one y column")
    if "z" in roles and "z_cat" in roles:
        raise SchemaError("z columns must be all real or a single categorical column")
    if roles.count("z_cat") > 1:
        raise SchemaError("at most one categorical z column")
    body = rows[1:]
    if not body:
        raise ParseError("no data rows", row=1)
    cols = {r: [] for r in SCHEMA_ROLES}
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise ParseError(f"row {i} has {len(row)} fields, expected {len(header)}", row=i)
        rec = {r: [] for r in SCHEMA_ROLES}
        for name, r, cell in zip(header, roles, row):
            cell = cell.strip()
            if r == "ignore":
                continue
            if cell == "":
                raise ParseError(f"missing value at row {i}, column {name!r}", row=i, column=name)
            if r == "z_cat":
                rec[r].append(cell)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric value {cell!r} at row {i}, column {name!r}", row=i, column=name) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite value at row {i}, column {name!r}", row=i, column=name)
            rec[r].append(v)
        for r in SCHEMA_ROLES:
            cols[r].append(rec[r])
    X, Y = np.array(cols["x"]), np.array(cols["y"])
    if "z_cat" in roles:
        raw = [c[0] for c in cols["z_cat"]]
        try:
            Z = np.array([int(v) for v in raw], dtype=np.int64)
        except ValueError:
            lookup = {v: k for k, v in enumerate(sorted(set(raw)))}
            Z = np.array([lookup[v] for v in raw], dtype=np.int64)
        return Dataset(X, Y, Z, role, z_kind="categorical")
    if "z" in roles:
        return Dataset(X, Y, np.array(cols["z"]), role, z_kind="real")
    return Dataset(X, Y, None, role)


def export_csv(data: Dataset, path, metadata: dict | None = None) -> dict:
    """Write ``data`` as CSV plus ``<path>.meta.json``; returns the schema
    that reads it back."""
    header = [f"x{j}" for j in range(data.d_x)] + [f"y{j}" for j in range(data.d_y)]
    schema = {h: h[0] for h in header}
    cat = data.z_kind == "categorical"
    z_is_x = not cat and data.Z.shape == data.X.shape and np.array_equal(data.Z, data.X)
    if cat:
        header.append("z")
        schema["z"] = "z_cat"
    elif not z_is_x:
        zh = [f"z{j}" for j in range(data.Z.shape[1])]
        header += zh
        schema.update({h: "z" for h in zh})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(data.n):
            row = [f"{v:.17g}" for v in data.X[i]] + [f"{v:.17g}" for v in data.Y[i]]
            if cat:
                row.append(str(int(data.Z[i])))
            elif not z_is_x:
                row += [f"{v:.17g}" for v in data.Z[i]]
            w.writerow(row)
    meta = {"schema": schema, "n": data.n, "role": data.role, "git": _git_hash(), **(metadata or {})}
    with open(f"{path}.meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return schema
