"""Flat key-value text format shared by saved models.

Each line is ``key token token ...``.  The first line is the magic
``nbqos-model 1``.  Floats are written with ``repr`` so they reload
bit-for-bit.  Common records:

    kind <name>                    model kind (nbmodel1, pmf, ...)
    shape <num_users> <num_services>
    mu <float>                     global training mean
    user_stat <u> <mean> <count>   only users with observations
    service_stat <i> <mean> <count>
    entry <u> <i> <value>          training observations

Model-specific records are documented next to each model's writer.
"""

from __future__ import annotations

import numpy as np

from .dataset import MatrixStats, QosMatrix
from .errors import ParseError

MAGIC = "nbqos-model"
VERSION = "1"


def fmt(x):
    return repr(float(x))


def read_records(path):
    records = []
    with open(path) as fh:
        first = fh.readline().split()
        if first != [MAGIC, VERSION]:
            raise ParseError(f"not a {MAGIC} {VERSION} file", 1)
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if parts:
                records.append((lineno, parts[0], parts[1:]))
    return records


def write_header(fh, kind, shape, stats):
    fh.write(f"{MAGIC} {VERSION}\n")
    fh.write(f"kind {kind}\n")
    fh.write(f"shape {shape[0]} {shape[1]}\n")
    fh.write(f"mu {fmt(stats.global_mean)}\n")
    for u in np.flatnonzero(stats.user_counts):
        fh.write(f"user_stat {u} {fmt(stats.user_means[u])} {stats.user_counts[u]}\n")
    for i in np.flatnonzero(stats.service_counts):
        fh.write(f"service_stat {i} {fmt(stats.service_means[i])} {stats.service_counts[i]}\n")


def write_entries(fh, m):
    for u, i, r in zip(m.users.tolist(), m.services.tolist(), m.values.tolist()):
        fh.write(f"entry {u} {i} {r!r}\n")


class Records:
    """Grouped view over parsed records with the common blocks decoded."""

    def __init__(self, path):
        self.path = path
        self.scalars = {}
        self.groups = {}
        for lineno, key, toks in read_records(path):
            self.groups.setdefault(key, []).append((lineno, toks))
        for key, rows in self.groups.items():
            if len(rows) == 1:
                self.scalars[key] = rows[0][1]

    def scalar(self, key, cast=str):
        if key not in self.scalars:
            raise ParseError(f"{self.path}: missing '{key}' record")
        toks = self.scalars[key]
        try:
            return cast(toks[0]) if len(toks) == 1 else tuple(cast(t) for t in toks)
        except (ValueError, IndexError):
            raise ParseError(f"{self.path}: bad '{key}' record") from None

    def rows(self, key):
        return self.groups.get(key, [])

    def matrix_and_stats(self):
        nu, ns = self.scalar("shape", int)
        us, ss, vs = [], [], []
        for lineno, toks in self.rows("entry"):
            try:
                us.append(int(toks[0]))
                ss.append(int(toks[1]))
                vs.append(float(toks[2]))
            except (ValueError, IndexError):
                raise ParseError("bad entry record", lineno) from None
        m = QosMatrix(nu, ns, us, ss, vs)
        um = np.full(nu, np.nan)
        uc = np.zeros(nu, dtype=np.int64)
        sm = np.full(ns, np.nan)
        sc = np.zeros(ns, dtype=np.int64)
        for key, means, counts in (("user_stat", um, uc), ("service_stat", sm, sc)):
            for lineno, toks in self.rows(key):
                try:
                    j = int(toks[0])
                    means[j] = float(toks[1])
                    counts[j] = int(toks[2])
                except (ValueError, IndexError):
                    raise ParseError(f"bad {key} record", lineno) from None
        for a in (um, uc, sm, sc):
            a.setflags(write=False)
        stats = MatrixStats(self.scalar("mu", float), um, sm, uc, sc)
        return m, stats

    def vector(self, key, n, fill=0.0):
        out = np.full(n, fill)
        for lineno, toks in self.rows(key):
            try:
                out[int(toks[0])] = float(toks[1])
            except (ValueError, IndexError):
                raise ParseError(f"bad {key} record", lineno) from None
        return out
