"""Sparse QoS matrices: ingestion, statistics and seeded train/test splits.

Two on-disk formats are understood:

* ``dense``: one whitespace-separated row per user, one column per service.
  Any strictly negative value marks a missing cell (WS-DREAM convention);
  zero is a legitimate observation.
* ``triplet``: CSV with the header ``user_id,service_id,value`` and
  zero-based integer ids.  Lines starting with ``#`` before the header are
  comments; ``# num_users=U num_services=S`` pins the shape, otherwise it is
  inferred from the largest ids.

Splits draw from numpy's PCG64 bit generator (``Generator(PCG64(seed))``),
which produces the same stream on every platform.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DegenerateSplitError, EmptyDataError, ParseError

TRIPLET_HEADER = ("user_id", "service_id", "value")
_SHAPE_RE = re.compile(r"num_users\s*=\s*(\d+)\s+num_services\s*=\s*(\d+)")


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class QosMatrix:
    """Immutable sparse user x service matrix of observed QoS values.

    Entries are kept as parallel coordinate arrays sorted by (user, service).
    """

    def __init__(self, num_users, num_services, users, services, values):
        users = np.asarray(users, dtype=np.int64).ravel()
        services = np.asarray(services, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        if not (len(users) == len(services) == len(values)):
            raise ValueError("coordinate arrays differ in length")
        if num_users < 0 or num_services < 0:
            raise ValueError("negative matrix shape")
        if len(users):
            if users.min() < 0 or users.max() >= num_users:
                raise ValueError("user id out of range")
            if services.min() < 0 or services.max() >= num_services:
                raise ValueError("service id out of range")
            if not np.all(np.isfinite(values)) or values.min() < 0:
                raise ValueError("values must be finite and non-negative")
        order = np.lexsort((services, users))
        users, services, values = users[order], services[order], values[order]
        if len(users) > 1:
            dup = (np.diff(users) == 0) & (np.diff(services) == 0)
            if dup.any():
                j = int(np.argmax(dup))
                raise ValueError(f"duplicate entry ({users[j]}, {services[j]})")
        object.__setattr__(self, "num_users", int(num_users))
        object.__setattr__(self, "num_services", int(num_services))
        object.__setattr__(self, "users", _readonly(users, np.int64))
        object.__setattr__(self, "services", _readonly(services, np.int64))
        object.__setattr__(self, "values", _readonly(values, np.float64))

    def __setattr__(self, name, value):
        raise AttributeError("QosMatrix is immutable")

    @classmethod
    def from_dict(cls, num_users, num_services, entries):
        """Build from a ``{(user, service): value}`` mapping."""
        if entries:
            keys = list(entries)
            us = [k[0] for k in keys]
            ss = [k[1] for k in keys]
            vs = [entries[k] for k in keys]
        else:
            us, ss, vs = [], [], []
        return cls(num_users, num_services, us, ss, vs)

    @classmethod
    def from_dense(cls, array):
        """Build from a 2-D array; negative or NaN cells are missing."""
        a = np.asarray(array, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("dense input must be 2-D")
        observed = np.isfinite(a) & (a >= 0)
        us, ss = np.nonzero(observed)
        return cls(a.shape[0], a.shape[1], us, ss, a[us, ss])

    @property
    def shape(self):
        return (self.num_users, self.num_services)

    def __len__(self):
        return len(self.values)

    @cached_property
    def entries(self):
        return {
            (int(u), int(i)): float(r)
            for u, i, r in zip(self.users, self.services, self.values)
        }

    @cached_property
    def observed_set(self):
        return frozenset(self.entries)

    @cached_property
    def _dense(self):
        vals = np.zeros(self.shape, dtype=np.float64)
        mask = np.zeros(self.shape, dtype=bool)
        vals[self.users, self.services] = self.values
        mask[self.users, self.services] = True
        vals.setflags(write=False)
        mask.setflags(write=False)
        return vals, mask

    def dense(self):
        """Return ``(values, mask)`` dense arrays; missing cells hold 0."""
        return self._dense

    def subset(self, index):
        """Matrix restricted to the entries selected by ``index``."""
        return QosMatrix(
            self.num_users,
            self.num_services,
            self.users[index],
            self.services[index],
            self.values[index],
        )

    def __eq__(self, other):
        if not isinstance(other, QosMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.services, other.services)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def __repr__(self):
        return f"QosMatrix({self.num_users}x{self.num_services}, {len(self)} entries)"


@dataclass(frozen=True, eq=False)
class MatrixStats:
    """Global, per-user and per-service means of a training matrix.

    Means of users/services without observations are NaN and their counts 0.
    """

    global_mean: float
    user_means: np.ndarray
    service_means: np.ndarray
    user_counts: np.ndarray
    service_counts: np.ndarray

    @property
    def num_users(self):
        return len(self.user_means)

    @property
    def num_services(self):
        return len(self.service_means)

    def user_mean(self, u):
        """Mean of user ``u``, or the global mean for cold users."""
        if 0 <= u < self.num_users and self.user_counts[u] > 0:
            return float(self.user_means[u])
        return self.global_mean

    def service_mean(self, i):
        if 0 <= i < self.num_services and self.service_counts[i] > 0:
            return float(self.service_means[i])
        return self.global_mean

    @cached_property
    def user_features(self):
        """User means with the global mean filled in for cold users."""
        f = np.where(self.user_counts > 0, self.user_means, self.global_mean)
        f.setflags(write=False)
        return f

    @cached_property
    def service_features(self):
        f = np.where(self.service_counts > 0, self.service_means, self.global_mean)
        f.setflags(write=False)
        return f

    def user_mean_map(self):
        return {int(u): float(self.user_means[u]) for u in np.flatnonzero(self.user_counts)}

    def service_mean_map(self):
        return {
            int(i): float(self.service_means[i]) for i in np.flatnonzero(self.service_counts)
        }


@dataclass(frozen=True, eq=False)
class TrainTestSplit:
    train: QosMatrix
    test: QosMatrix
    density: float
    seed: int


def _parse_float(token, lineno):
    try:
        x = float(token)
    except ValueError:
        raise ParseError(f"non-numeric token {token!r}", lineno) from None
    if not math.isfinite(x):
        raise ParseError(f"non-finite value {token!r}", lineno)
    return x


def _load_dense(path):
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ParseError(f"expected {width} columns, found {len(parts)}", lineno)
            try:
                row = np.asarray(parts, dtype=np.float64)
            except ValueError:
                bad = next(p for p in parts if not _is_float(p))
                raise ParseError(f"non-numeric token {bad!r}", lineno) from None
            if not np.all(np.isfinite(row)):
                bad = parts[int(np.argmin(np.isfinite(row)))]
                raise ParseError(f"non-finite value {bad!r}", lineno)
            rows.append(row)
    if not rows:
        raise EmptyDataError(f"{path}: no rows")
    return QosMatrix.from_dense(np.vstack(rows))


def _is_float(token):
    try:
        float(token)
    except ValueError:
        return False
    return True


def _load_triplet(path):
    shape = None
    header_seen = False
    us, ss, vs = [], [], []
    seen = set()
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if not header_seen:
                if row[0].lstrip().startswith("#"):
                    m = _SHAPE_RE.search(",".join(row))
                    if m:
                        shape = (int(m.group(1)), int(m.group(2)))
                    continue
                if tuple(c.strip() for c in row) != TRIPLET_HEADER:
                    raise ParseError("missing header 'user_id,service_id,value'", lineno)
                header_seen = True
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 columns, found {len(row)}", lineno)
            try:
                u, i = int(row[0]), int(row[1])
            except ValueError:
                raise ParseError(f"non-integer id in {row!r}", lineno) from None
            if u < 0 or i < 0:
                raise ParseError("negative id", lineno)
            r = _parse_float(row[2].strip(), lineno)
            if (u, i) in seen:
                raise ParseError(f"duplicate entry ({u}, {i})", lineno)
            seen.add((u, i))
            if r < 0:
                continue
            us.append(u)
            ss.append(i)
            vs.append(r)
    if not header_seen:
        raise ParseError("missing header 'user_id,service_id,value'", 1)
    if not vs:
        raise EmptyDataError(f"{path}: no observed entries")
    if shape is None:
        ids_u = [k[0] for k in seen]
        ids_s = [k[1] for k in seen]
        shape = (max(ids_u) + 1, max(ids_s) + 1)
    elif max(k[0] for k in seen) >= shape[0] or max(k[1] for k in seen) >= shape[1]:
        raise ParseError("id outside the declared shape")
    return QosMatrix(shape[0], shape[1], us, ss, vs)


def load_matrix(path, format="dense"):
    """Read a QoS matrix from ``path`` in ``dense`` or ``triplet`` format."""
    path = Path(path)
    if format == "dense":
        m = _load_dense(path)
    elif format == "triplet":
        m = _load_triplet(path)
    else:
        raise ValueError(f"unknown format {format!r}")
    if len(m) == 0:
        raise EmptyDataError(f"{path}: every cell is missing")
    return m


def save_triplet(m, path):
    """Write ``m`` as triplet CSV; values use ``repr`` so reloading is exact."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# num_users={m.num_users} num_services={m.num_services}\n")
        fh.write(",".join(TRIPLET_HEADER) + "\n")
        for u, i, r in zip(m.users.tolist(), m.services.tolist(), m.values.tolist()):
            fh.write(f"{u},{i},{r!r}\n")


def compute_stats(m):
    if len(m) == 0:
        raise EmptyDataError("cannot compute statistics of an empty matrix")
    uc = np.bincount(m.users, minlength=m.num_users)
    sc = np.bincount(m.services, minlength=m.num_services)
    us = np.bincount(m.users, weights=m.values, minlength=m.num_users)
    ss = np.bincount(m.services, weights=m.values, minlength=m.num_services)
    with np.errstate(invalid="ignore", divide="ignore"):
        um = np.where(uc > 0, us / np.maximum(uc, 1), np.nan)
        sm = np.where(sc > 0, ss / np.maximum(sc, 1), np.nan)
    for a in (uc, sc, um, sm):
        a.setflags(write=False)
    return MatrixStats(
        global_mean=float(m.values.sum() / len(m)),
        user_means=um,
        service_means=sm,
        user_counts=uc,
        service_counts=sc,
    )


def train_size(n, density):
    """Number of training entries: round-half-up of ``density * n``."""
    return int(math.floor(density * n + 0.5))


def split(m, density, seed):
    """Sample ``density`` of the observed entries for training.

    Training entries are a uniformly random subset drawn with
    ``Generator(PCG64(seed)).permutation``; the test set is the complement.
    """
    if not 0.0 < density < 1.0:
        raise ValueError(f"density must lie in (0, 1), got {density}")
    n = len(m)
    if n < 2:
        raise DegenerateSplitError(f"need at least 2 entries to split, have {n}")
    n_train = train_size(n, density)
    if n_train == 0 or n_train == n:
        raise DegenerateSplitError(
            f"density {density} on {n} entries leaves an empty "
            f"{'train' if n_train == 0 else 'test'} set"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    in_train = np.zeros(n, dtype=bool)
    in_train[perm[:n_train]] = True
    return TrainTestSplit(
        train=m.subset(in_train),
        test=m.subset(~in_train),
        density=float(density),
        seed=int(seed),
    )


def union(a, b):
    """Disjoint union of two matrices of the same shape."""
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    return QosMatrix(
        a.num_users,
        a.num_services,
        np.concatenate([a.users, b.users]),
        np.concatenate([a.services, b.services]),
        np.concatenate([a.values, b.values]),
    )
