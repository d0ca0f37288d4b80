"""Numerical substrate: errors, seeded RNG, SPD solves and dataset containers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

ROLES = ("pretrain", "calibration", "test")


class MopiError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(MopiError, ValueError):
    pass


class NotPositiveDefinite(MopiError, np.linalg.LinAlgError):
    pass


class EmptySplit(MopiError, ValueError):
    pass


class EmptyGroup(MopiError, ValueError):
    pass


class RoleError(MopiError, ValueError):
    pass


class NonFiniteObjective(MopiError, FloatingPointError):
    """Raised when an objective turns NaN/inf; the partial trace rides along."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class SeededRng:
    """Portable seeded generator.

    Wraps numpy's Philox counter-based bit generator, whose output stream is
    fixed by the seed on every platform. ``child(*keys)`` derives an
    independent stream deterministically, so one base seed can feed many
    pipeline stages without the draws of one stage shifting another.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int, *, spawn_key: tuple = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, spawn_key=self.spawn_key + tuple(keys))

    def __getattr__(self, name):
        # uniform, normal, permutation, choice, integers ...
        return getattr(self.generator, name)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, spawn_key={self.spawn_key})"


def as_rng(rng) -> SeededRng:
    if isinstance(rng, SeededRng):
        return rng
    return SeededRng(int(rng))


def check_square(A: np.ndarray, name: str = "A") -> None:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {A.shape}")


def spd_solve(A, B) -> np.ndarray:
    """Solve ``A X = B`` for symmetric positive-definite ``A`` by Cholesky.

    ``B`` may be a vector or an ``n x k`` matrix; the result has the shape of
    ``B``. Raises :class:`NotPositiveDefinite` if the factorization fails.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    check_square(A)
    if B.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"rhs has {B.shape[0]} rows, matrix is {A.shape[0]}x{A.shape[0]}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-10 * scale):
        raise NotPositiveDefinite("matrix is not symmetric")
    try:
        factor = cho_factor(A, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    return cho_solve(factor, B, check_finite=False)


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: np.ndarray
    z: object


class Dataset:
    """Immutable collection of (x, y, z) triples with a fixed role.

    ``X`` is ``(n, d_X)``, ``Y`` is ``(n, d_Y)``. ``Z`` is either a 1-D array
    of integer category codes or a ``(n, d_Z)`` real array; ``z_kind`` records
    which ("categorical" or "real").
    """

    def __init__(self, X, Y, Z=None, role: str = "calibration", *, z_kind: str | None = None):
        if role not in ROLES:
            raise RoleError(f"unknown role {role!r}; expected one of {ROLES}")
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if Y.ndim == 1:
            Y = Y[:, None]
        n = X.shape[0]
        if n == 0:
            raise EmptySplit("a dataset must contain at least one sample")
        if Y.shape[0] != n:
            raise DimensionMismatch(f"X has {n} rows but Y has {Y.shape[0]}")
        if Z is None:
            Z, z_kind = X, "real"
        Z = np.asarray(Z)
        if z_kind is None:
            z_kind = "categorical" if Z.ndim == 1 and np.issubdtype(Z.dtype, np.integer) else "real"
        if z_kind == "categorical":
            if Z.ndim != 1:
                raise DimensionMismatch("categorical Z must be a 1-D code array")
            Z = Z.astype(np.int64)
        elif z_kind == "real":
            Z = Z.astype(float)
            if Z.ndim == 1:
                Z = Z[:, None]
        else:
            raise ValueError(f"unknown z_kind {z_kind!r}")
        if Z.shape[0] != n:
            raise DimensionMismatch(f"Z has {Z.shape[0]} rows, expected {n}")
        for arr in (X, Y, Z):
            arr.setflags(write=False)
        self._X, self._Y, self._Z = X, Y, Z
        self._role = role
        self.z_kind = z_kind

    @property
    def X(self) -> np.ndarray:
        return self._X

    @property
    def Y(self) -> np.ndarray:
        return self._Y

    @property
    def Z(self) -> np.ndarray:
        return self._Z

    @property
    def role(self) -> str:
        return self._role

    @property
    def n(self) -> int:
        return self._X.shape[0]

    @property
    def d_x(self) -> int:
        return self._X.shape[1]

    @property
    def d_y(self) -> int:
        return self._Y.shape[1]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> LabeledSample:
        z = int(self._Z[i]) if self.z_kind == "categorical" else self._Z[i]
        return LabeledSample(self._X[i], self._Y[i], z)

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(self.n))

    @property
    def samples(self) -> list[LabeledSample]:
        return list(self)

    def subset(self, idx, role: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self._X[idx], self._Y[idx], self._Z[idx], role or self._role, z_kind=self.z_kind)

    def with_role(self, role: str) -> "Dataset":
        return Dataset(self._X, self._Y, self._Z, role, z_kind=self.z_kind)

    def with_z(self, Z, z_kind: str | None = None) -> "Dataset":
        return Dataset(self._X, self._Y, Z, self._role, z_kind=z_kind)

    def __repr__(self):
        return f"Dataset(n={self.n}, d_x={self.d_x}, d_y={self.d_y}, z={self.z_kind}, role={self.role!r})"


def require_role(data: Dataset, role: str) -> None:
    if data.role != role:
        raise RoleError(f"expected a {role!r} dataset, got role {data.role!r}")


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    # the tiny slack keeps e.g. 10 * 0.3 = 2.9999999999999996 at 3
    n_pre = math.floor(n * fractions[0] + 1e-9)
    n_cal = math.floor(n * fractions[1] + 1e-9)
    return n_pre, n_cal, n - n_pre - n_cal


def split_dataset(data: Dataset, fractions, rng) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle ``data`` and partition it into pretrain/calibration/test sets.

    Sizes are floor-allocated from ``fractions`` with the remainder going to
    the test split.
    """
    sizes = split_sizes(data.n, fractions)
    if min(sizes) == 0:
        raise EmptySplit(f"split sizes {sizes} leave a split empty")
    perm = as_rng(rng).permutation(data.n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return (
        data.subset(perm[:a], "pretrain"),
        data.subset(perm[a:b], "calibration"),
        data.subset(perm[b:], "test"),
    )
