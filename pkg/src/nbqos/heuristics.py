"""Mean predictors and memory-based CF (UPCC, IPCC, UIPCC).

UIPCC blends the two CF predictions with the confidence weights of the
WSRec formulation: for the neighbours actually used,
``con = sum_v (S_v / sum_w S_w) * S_v``, and the user-side weight is
``lam * con_u / (lam * con_u + (1 - lam) * con_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import compute_stats
from .similarity import build_index

STAT_KINDS = ("gmean", "umean", "imean")
CF_KINDS = ("upcc", "ipcc", "uipcc")
KINDS = STAT_KINDS + CF_KINDS

DEFAULT_USER_K = 10
DEFAULT_SERVICE_K = 50
_CHUNK = 65536


@dataclass(frozen=True, eq=False)
class HeuristicModel:
    kind: str
    stats: object
    train: object = None
    user_index: object = None
    service_index: object = None
    blend: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown heuristic {self.kind!r}")
        needs_u = self.kind in ("upcc", "uipcc")
        needs_i = self.kind in ("ipcc", "uipcc")
        if needs_u != (self.user_index is not None) or needs_i != (
            self.service_index is not None
        ):
            raise ValueError(f"{self.kind} model has the wrong set of indexes")
        if self.kind in CF_KINDS and self.train is None:
            raise ValueError("CF models need the training matrix")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend must lie in [0, 1]")

    @property
    def k(self):
        if self.user_index is not None:
            return self.user_index.k
        if self.service_index is not None:
            return self.service_index.k
        return 0

    def predict(self, u, i):
        return float(self.predict_many(np.array([u]), np.array([i]))[0])

    def predict_many(self, users, services):
        users = np.asarray(users, dtype=np.int64)
        services = np.asarray(services, dtype=np.int64)
        if self.kind in STAT_KINDS:
            return _stat(self, users, services)
        out = np.empty(len(users))
        for s in range(0, len(users), _CHUNK):
            u, i = users[s : s + _CHUNK], services[s : s + _CHUNK]
            if self.kind == "upcc":
                out[s : s + _CHUNK] = _upcc(self, u, i)[0]
            elif self.kind == "ipcc":
                out[s : s + _CHUNK] = _ipcc(self, u, i)[0]
            else:
                out[s : s + _CHUNK] = _uipcc(self, u, i)
        return out


def fit_heuristic(train, kind, k_user=DEFAULT_USER_K, k_service=DEFAULT_SERVICE_K, blend=0.5):
    """Build a heuristic model from training data only."""
    stats = compute_stats(train)
    if kind in STAT_KINDS:
        return HeuristicModel(kind, stats)
    uidx = build_index(train, "user", k_user) if kind in ("upcc", "uipcc") else None
    sidx = build_index(train, "service", k_service) if kind in ("ipcc", "uipcc") else None
    return HeuristicModel(kind, stats, train, uidx, sidx, blend)


def _stat(model, users, services):
    st = model.stats
    if model.kind == "gmean":
        return np.full(len(users), st.global_mean)
    if model.kind == "umean":
        return st.user_features[users]
    return st.service_features[services]


def _cf(base, sims, valid, resid):
    w = np.where(valid, sims, 0.0)
    den = w.sum(axis=1)
    num = (w * np.where(valid, resid, 0.0)).sum(axis=1)
    has = den > 0
    safe = np.where(has, den, 1.0)
    pred = np.where(has, base + num / safe, base)
    con = np.where(has, (w * w).sum(axis=1) / safe, 0.0)
    return pred, con


def _upcc(model, users, services):
    st, idx = model.stats, model.user_index
    values, mask = model.train.dense()
    nb = idx.topk_ids[users]
    sims = idx.topk_sims[users]
    nbc = np.maximum(nb, 0)
    col = services[:, None]
    valid = (nb >= 0) & mask[nbc, col]
    resid = values[nbc, col] - st.user_features[nbc]
    pred, con = _cf(st.user_features[users], sims, valid, resid)
    cold = st.user_counts[users] == 0
    pred = np.where(cold, st.global_mean, pred)
    return pred, np.where(cold, 0.0, con)


def _ipcc(model, users, services):
    st, idx = model.stats, model.service_index
    values, mask = model.train.dense()
    nb = idx.topk_ids[services]
    sims = idx.topk_sims[services]
    nbc = np.maximum(nb, 0)
    row = users[:, None]
    valid = (nb >= 0) & mask[row, nbc]
    resid = values[row, nbc] - st.service_features[nbc]
    pred, con = _cf(st.service_features[services], sims, valid, resid)
    cold = st.service_counts[services] == 0
    pred = np.where(cold, st.global_mean, pred)
    return pred, np.where(cold, 0.0, con)


def _uipcc(model, users, services):
    up, cu = _upcc(model, users, services)
    ip, ci = _ipcc(model, users, services)
    lam = model.blend
    if lam == 1.0:
        return up
    if lam == 0.0:
        return ip
    a, b = lam * cu, (1.0 - lam) * ci
    both = (cu > 0) & (ci > 0)
    w = np.where(both, a / np.where(both, a + b, 1.0), lam)
    w = np.where((cu > 0) & (ci == 0), 1.0, w)
    w = np.where((cu == 0) & (ci > 0), 0.0, w)
    return w * up + (1.0 - w) * ip


def predict_stat(model, u, i):
    if model.kind not in STAT_KINDS:
        raise ValueError(f"{model.kind} is not a statistical model")
    return model.predict(u, i)


def predict_upcc(model, u, i):
    return float(_upcc(model, np.array([u]), np.array([i]))[0][0])


def predict_ipcc(model, u, i):
    return float(_ipcc(model, np.array([u]), np.array([i]))[0][0])


def predict_uipcc(model, u, i):
    return float(_uipcc(model, np.array([u]), np.array([i]))[0])
