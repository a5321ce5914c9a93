"""Pearson similarities and top-k neighbour indexes over a QoS matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_BLOCK = 256
# Relative threshold below which a co-observed variance counts as zero.
_VAR_EPS = 1e-10
# Similarities equal to this many decimals count as tied when ranking.
_TIE_DECIMALS = 12


def pcc(a, b, co_observed=None):
    """Pearson correlation of ``a`` and ``b`` over their co-observed positions.

    ``co_observed`` is a boolean mask or an index sequence; when omitted,
    positions where both vectors are finite are used.  Fewer than two
    co-observations or a zero variance on either side yields 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if co_observed is None:
        sel = np.isfinite(a) & np.isfinite(b)
    else:
        sel = np.asarray(co_observed)
        if sel.dtype != bool:
            sel = np.asarray(list(co_observed), dtype=np.int64)
    x, y = a[sel], b[sel]
    if len(x) < 2:
        return 0.0
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx <= _VAR_EPS * float(x @ x) or syy <= _VAR_EPS * float(y @ y):
        return 0.0
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def _axis_arrays(m, axis):
    values, mask = m.dense()
    if axis == "user":
        return values, mask
    if axis == "service":
        return values.T, mask.T
    raise ValueError(f"axis must be 'user' or 'service', got {axis!r}")


def _centered(values, mask):
    counts = mask.sum(axis=1)
    means = np.where(counts > 0, (values * mask).sum(axis=1) / np.maximum(counts, 1), 0.0)
    return np.where(mask, values - means[:, None], 0.0)


def _pcc_rows(xc, mf, rows):
    """PCC of ``rows`` against every row; returns (sims, co-observation counts)."""
    xb, mb = xc[rows], mf[rows]
    n = mb @ mf.T
    sa = xb @ mf.T
    sb = mb @ xc.T
    saa = (xb * xb) @ mf.T
    sbb = mb @ (xc * xc).T
    sab = xb @ xc.T
    with np.errstate(invalid="ignore", divide="ignore"):
        nn = np.maximum(n, 1.0)
        cov = sab - sa * sb / nn
        va = saa - sa * sa / nn
        vb = sbb - sb * sb / nn
        ok = (n >= 2) & (va > _VAR_EPS * saa) & (vb > _VAR_EPS * sbb)
        s = np.where(ok, cov / np.sqrt(np.where(ok, va * vb, 1.0)), 0.0)
    return np.clip(s, -1.0, 1.0), n


@dataclass(frozen=True, eq=False)
class SimilarityIndex:
    """Top-k positively similar neighbours for every id on one axis.

    ``topk_ids`` and ``topk_sims`` are ``(n, width)`` arrays padded with -1
    and 0; row ``a`` lists neighbours by decreasing similarity, ties (equal to
    12 decimals) broken by ascending id.  ``width`` is ``min(k, n - 1)``.
    """

    axis: str
    k: int
    topk_ids: np.ndarray
    topk_sims: np.ndarray
    lengths: np.ndarray
    _values: np.ndarray = field(repr=False)
    _mask: np.ndarray = field(repr=False)

    @property
    def size(self):
        return self.topk_ids.shape[0]

    @property
    def width(self):
        return self.topk_ids.shape[1]

    def neighbors(self, a):
        """Ordered ``[(neighbour_id, similarity), ...]`` for id ``a``."""
        n = int(self.lengths[a])
        return list(zip(self.topk_ids[a, :n].tolist(), self.topk_sims[a, :n].tolist()))

    def similarity(self, a, b):
        """S_ab, or None when ``a == b`` or the pair shares no observation."""
        if a == b:
            return None
        lo, hi = min(a, b), max(a, b)
        co = self._mask[lo] & self._mask[hi]
        if not co.any():
            return None
        return pcc(self._values[lo], self._values[hi], co)

    def full_matrix(self):
        """Dense symmetric similarity matrix with NaN on absent pairs."""
        xc = _centered(self._values, self._mask)
        mf = self._mask.astype(np.float64)
        n = self.size
        out = np.empty((n, n))
        for start in range(0, n, _BLOCK):
            rows = np.arange(start, min(start + _BLOCK, n))
            s, cnt = _pcc_rows(xc, mf, rows)
            s[cnt == 0] = np.nan
            out[rows] = s
        upper = np.triu(out, 1)
        out = upper + upper.T
        np.fill_diagonal(out, np.nan)
        return out

    @property
    def sims(self):
        """Mapping ``{(a, b): S_ab}`` over pairs with co-observations."""
        full = self.full_matrix()
        a, b = np.nonzero(np.isfinite(full))
        return {(int(x), int(y)): float(full[x, y]) for x, y in zip(a, b)}


def build_index(m, axis="user", k=10):
    """Compute PCC similarities along ``axis`` and keep the top ``k`` positives."""
    if k < 0:
        raise ValueError("k must be non-negative")
    values, mask = _axis_arrays(m, axis)
    n = values.shape[0]
    width = max(0, min(k, n - 1))
    ids = np.full((n, width), -1, dtype=np.int64)
    sims = np.zeros((n, width))
    lengths = np.zeros(n, dtype=np.int64)
    if width > 0:
        xc = _centered(values, mask)
        mf = mask.astype(np.float64)
        for start in range(0, n, _BLOCK):
            rows = np.arange(start, min(start + _BLOCK, n))
            s, _ = _pcc_rows(xc, mf, rows)
            s[np.arange(len(rows)), rows] = 0.0
            s[s <= 0.0] = 0.0
            # rank on rounded values so float noise cannot reorder ties;
            # the stable sort then keeps ascending id among them
            key = -np.round(s, _TIE_DECIMALS)
            order = np.argsort(key, axis=1, kind="stable")[:, :width]
            top = np.take_along_axis(s, order, axis=1)
            keep = top > 0.0
            ids[rows] = np.where(keep, order, -1)
            sims[rows] = np.where(keep, top, 0.0)
            lengths[rows] = keep.sum(axis=1)
    for a in (ids, sims, lengths):
        a.setflags(write=False)
    return SimilarityIndex(axis, int(k), ids, sims, lengths, values, mask)


@dataclass(frozen=True)
class NeighborSet:
    members: list
    normalizer: float


def neighbor_set(index, u, i, train):
    """Top-k neighbours of user ``u`` that observed service ``i`` in ``train``."""
    if index.axis != "user":
        raise ValueError("neighbor_set needs a user-axis index")
    _, mask = train.dense()
    if not 0 <= u < index.size:
        return NeighborSet([], 0.0)
    members = [v for v, _ in index.neighbors(u) if mask[v, i]]
    norm = 1.0 / math.sqrt(len(members)) if members else 0.0
    return NeighborSet(members, norm)
