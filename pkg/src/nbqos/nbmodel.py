"""Learned neighbourhood models for QoS prediction.

A prediction is a first-tier estimate ``b_ui`` plus a neighbourhood tier::

    r_hat(u, i) = b_ui + |N(i;u)|^-1/2 * sum_{v in N(i;u)} (r_vi - bt_vi) * w_uv

where ``N(i;u)`` holds the top-k PCC neighbours of ``u`` that observed ``i``
and ``w_uv`` are global weights learned from data.  The three variants
differ in ``b_ui``:

* ``nbmodel1``: ``mu + b_u + b_i``
* ``nbmodel2``: ``w_u * mu_u + w_i * mu_i``
* ``nbmodel3``: ``mu + b_u + b_i + w_u * mu_u + w_i * mu_i``

The residual baseline ``bt_vi = max(0, mu_v + mu_i - mu)`` is computed once
from training statistics and stays fixed, so the neighbourhood residuals are
constants during learning.  Parameters start at zero and are fitted by SGD on
the regularized squared error, with the learning rates multiplied by
``decay`` after every epoch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import modelio
from ._jit import njit
from .dataset import compute_stats
from .errors import EmptyDataError, ParseError, TrainingDivergedError
from .similarity import SimilarityIndex, build_index

DEFAULT_K = 80
DEFAULT_CLAMP = 20.0
_CHUNK = 65536


class NbVariant(str, enum.Enum):
    NBMODEL1 = "nbmodel1"
    NBMODEL2 = "nbmodel2"
    NBMODEL3 = "nbmodel3"

    @property
    def uses_bias(self):
        return self is not NbVariant.NBMODEL2

    @property
    def uses_features(self):
        return self is not NbVariant.NBMODEL1


@dataclass
class TrainConfig:
    lambda1: float = 0.001
    lambda2: float = 0.001
    lambda3: float = 0.001
    gamma1: float = 0.001
    gamma2: float = 0.001
    decay: float = 0.9
    epochs: int = 100
    early_stop_tol: float = 1e-5
    shuffle_seed: int = 0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "gamma1", "gamma2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass(eq=False)
class NeighborhoodParams:
    """Learned parameters of one variant plus the frozen training statistics.

    ``w_nb[u, s]`` is the weight ``w_uv`` for ``v = neighbor_ids[u, s]``;
    padded slots (id -1) are always zero.
    """

    variant: NbVariant
    k: int
    stats: object
    neighbor_ids: np.ndarray
    b_u: np.ndarray
    b_i: np.ndarray
    w_u: np.ndarray
    w_i: np.ndarray
    w_nb: np.ndarray
    clamp_max: float | None = DEFAULT_CLAMP
    residual_baseline: str = "frozen"
    history: list = field(default_factory=list)

    @classmethod
    def zeros(cls, variant, stats, index, clamp_max=DEFAULT_CLAMP):
        variant = NbVariant(variant)
        nu, ns = stats.num_users, stats.num_services
        return cls(
            variant=variant,
            k=index.k,
            stats=stats,
            neighbor_ids=np.array(index.topk_ids),
            b_u=np.zeros(nu),
            b_i=np.zeros(ns),
            w_u=np.zeros(nu),
            w_i=np.zeros(ns),
            w_nb=np.zeros(index.topk_ids.shape),
            clamp_max=clamp_max,
        )

    @property
    def w_uv(self):
        """Sparse view ``{(u, v): w_uv}`` over the neighbour slots."""
        us, slots = np.nonzero(self.neighbor_ids >= 0)
        return {
            (int(u), int(self.neighbor_ids[u, s])): float(self.w_nb[u, s])
            for u, s in zip(us, slots)
        }

    def arrays(self):
        return (self.b_u, self.b_i, self.w_u, self.w_i, self.w_nb)

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def freeze(self):
        for a in self.arrays():
            a.setflags(write=False)
        return self


def residual_baseline(stats, users, services):
    """Frozen residual baseline ``max(0, mu_v + mu_i - mu)``."""
    b = stats.user_features[users] + stats.service_features[services] - stats.global_mean
    return np.maximum(b, 0.0)


def _baseline_many(params, users, services):
    st, v = params.stats, params.variant
    out = np.zeros(len(users))
    if v.uses_bias:
        out += st.global_mean + params.b_u[users] + params.b_i[services]
    if v.uses_features:
        out += params.w_u[users] * st.user_features[users]
        out += params.w_i[services] * st.service_features[services]
    return out


def baseline_component(params, u, i):
    """First-tier estimate ``b_ui`` of the variant; cold means fall back to mu."""
    st, v = params.stats, params.variant
    b = 0.0
    if v.uses_bias:
        b += st.global_mean + float(params.b_u[u]) + float(params.b_i[i])
    if v.uses_features:
        b += float(params.w_u[u]) * st.user_mean(u)
        b += float(params.w_i[i]) * st.service_mean(i)
    return b


def neighborhood_terms(neighbor_ids, stats, train, users, services):
    """Per-pair neighbour slots that observed the service, with their residuals.

    Returns ``(valid, resid)`` arrays of shape ``(n, width)``.
    """
    values, mask = train.dense()
    n, width = len(users), neighbor_ids.shape[1]
    if width == 0 or n == 0:
        return np.zeros((n, width), dtype=bool), np.zeros((n, width))
    nb = neighbor_ids[users]
    nbc = np.maximum(nb, 0)
    col = services[:, None]
    valid = (nb >= 0) & mask[nbc, col]
    resid = values[nbc, col] - residual_baseline(stats, nbc, col)
    return valid, np.where(valid, resid, 0.0)


def _raw_predict(params, users, services, train):
    base = _baseline_many(params, users, services)
    valid, resid = neighborhood_terms(params.neighbor_ids, params.stats, train, users, services)
    if valid.shape[1] == 0:
        return base
    cnt = valid.sum(axis=1)
    norm = np.where(cnt > 0, 1.0 / np.sqrt(np.maximum(cnt, 1)), 0.0)
    return base + norm * (resid * params.w_nb[users]).sum(axis=1)


def _clamp(params, pred):
    if params.clamp_max is None:
        return pred
    return np.clip(pred, 0.0, params.clamp_max)


def predict_many(params, users, services, train):
    users = np.asarray(users, dtype=np.int64)
    services = np.asarray(services, dtype=np.int64)
    out = np.empty(len(users))
    for s in range(0, len(users), _CHUNK):
        out[s : s + _CHUNK] = _raw_predict(
            params, users[s : s + _CHUNK], services[s : s + _CHUNK], train
        )
    return _clamp(params, out)


def predict(params, u, i, train, index=None):
    """Predicted QoS of user ``u`` on service ``i``, clamped to [0, clamp_max].

    ``index`` must be the one the parameters were trained with; the
    neighbour lists themselves are carried by ``params``.
    """
    if index is not None and not np.array_equal(index.topk_ids, params.neighbor_ids):
        raise ValueError("index does not match the trained neighbour lists")
    return float(predict_many(params, [u], [i], train)[0])


@njit
def _sgd_epoch(order, eu, ei, er, valid, resid, fu, fi, mu, use_bias, use_feat,
               bu, bi, wu, wi, wnb, g1, g2, l1, l2, l3):
    width = wnb.shape[1]
    for t in order:
        u = eu[t]
        i = ei[t]
        pred = 0.0
        if use_bias:
            pred += mu + bu[u] + bi[i]
        if use_feat:
            pred += wu[u] * fu[u] + wi[i] * fi[i]
        cnt = 0
        acc = 0.0
        for s in range(width):
            if valid[t, s]:
                cnt += 1
                acc += resid[t, s] * wnb[u, s]
        norm = 0.0
        if cnt > 0:
            norm = 1.0 / math.sqrt(cnt)
        pred += norm * acc
        e = er[t] - pred
        if use_bias:
            bu[u] += g1 * (e - l2 * bu[u])
            bi[i] += g1 * (e - l2 * bi[i])
        if use_feat:
            wu[u] += g1 * (e * fu[u] - l3 * wu[u])
            wi[i] += g1 * (e * fi[i] - l3 * wi[i])
        for s in range(width):
            if valid[t, s]:
                wnb[u, s] += g2 * (norm * e * resid[t, s] - l1 * wnb[u, s])


class _TrainingData:
    """Training entries with their neighbour residuals precomputed."""

    def __init__(self, params, train):
        self.users = np.ascontiguousarray(train.users)
        self.services = np.ascontiguousarray(train.services)
        self.values = np.ascontiguousarray(train.values)
        self.valid, self.resid = neighborhood_terms(
            params.neighbor_ids, params.stats, train, self.users, self.services
        )
        self.fu = np.ascontiguousarray(params.stats.user_features, dtype=np.float64)
        self.fi = np.ascontiguousarray(params.stats.service_features, dtype=np.float64)

    def run(self, params, order, g1, g2, cfg):
        _sgd_epoch(
            np.ascontiguousarray(order, dtype=np.int64),
            self.users, self.services, self.values, self.valid, self.resid,
            self.fu, self.fi, float(params.stats.global_mean),
            params.variant.uses_bias, params.variant.uses_features,
            params.b_u, params.b_i, params.w_u, params.w_i, params.w_nb,
            float(g1), float(g2), cfg.lambda1, cfg.lambda2, cfg.lambda3,
        )

    def errors(self, params):
        base = _baseline_many(params, self.users, self.services)
        if self.valid.shape[1] == 0:
            return self.values - base
        cnt = self.valid.sum(axis=1)
        norm = np.where(cnt > 0, 1.0 / np.sqrt(np.maximum(cnt, 1)), 0.0)
        nb = norm * (self.resid * params.w_nb[self.users]).sum(axis=1)
        return self.values - base - nb


def train(train, variant, cfg=None, index=None, clamp_max=DEFAULT_CLAMP, callback=None):
    """Fit a neighbourhood model by SGD.

    ``index`` defaults to a user PCC index with ``k = 80`` built on ``train``.
    ``callback(epoch, params)`` is invoked after every epoch.  Training stops
    after ``cfg.epochs`` epochs or once the training RMSE improves by less
    than ``cfg.early_stop_tol``.
    """
    if len(train) == 0:
        raise EmptyDataError("cannot train on an empty matrix")
    cfg = cfg or TrainConfig()
    if index is None:
        index = build_index(train, "user", DEFAULT_K)
    if index.axis != "user" or index.size != train.num_users:
        raise ValueError("training needs a user-axis index over the training matrix")
    stats = compute_stats(train)
    params = NeighborhoodParams.zeros(variant, stats, index, clamp_max)
    data = _TrainingData(params, train)
    rng = np.random.Generator(np.random.PCG64(cfg.shuffle_seed))
    g1, g2 = cfg.gamma1, cfg.gamma2
    prev = math.sqrt(np.mean(data.errors(params) ** 2))
    for epoch in range(1, cfg.epochs + 1):
        data.run(params, rng.permutation(len(train)), g1, g2, cfg)
        if not params.all_finite():
            raise TrainingDivergedError(epoch, "non-finite parameter")
        with np.errstate(over="ignore", invalid="ignore"):
            rmse = math.sqrt(np.mean(data.errors(params) ** 2))
        if not math.isfinite(rmse):
            raise TrainingDivergedError(epoch, "non-finite training error")
        params.history.append(rmse)
        if callback is not None:
            callback(epoch, params)
        g1 *= cfg.decay
        g2 *= cfg.decay
        if prev - rmse < cfg.early_stop_tol:
            break
        prev = rmse
    return params.freeze()


def objective_value(params, train, cfg=None, index=None):
    """Regularized squared error of the variant over the training entries.

    Regularization is charged per training case, so the objective is a sum
    of per-case terms whose gradients are exactly the SGD updates.
    """
    cfg = cfg or TrainConfig()
    data = _TrainingData(params, train)
    e = data.errors(params)
    u, i = data.users, data.services
    total = float(e @ e)
    wsq = np.where(data.valid, params.w_nb[u] ** 2, 0.0).sum(axis=1) if data.valid.size else 0.0
    total += cfg.lambda1 * float(np.sum(wsq))
    if params.variant.uses_bias:
        total += cfg.lambda2 * float(np.sum(params.b_u[u] ** 2 + params.b_i[i] ** 2))
    if params.variant.uses_features:
        total += cfg.lambda3 * float(np.sum(params.w_u[u] ** 2 + params.w_i[i] ** 2))
    return total


def sgd_directions(params, train, cfg, u, i):
    """Update directions for the training case ``(u, i)``.

    Each value is the bracketed term of its update rule, i.e. the parameter
    moves by ``gamma * direction``.  Parameters the variant does not use are
    omitted.  ``w_uv`` maps neighbour id to its direction.
    """
    r = train.entries[(u, i)]
    valid, resid = neighborhood_terms(
        params.neighbor_ids, params.stats, train, np.array([u]), np.array([i])
    )
    e = r - float(_raw_predict(params, np.array([u]), np.array([i]), train)[0])
    st = params.stats
    out = {}
    if params.variant.uses_bias:
        out["b_u"] = e - cfg.lambda2 * params.b_u[u]
        out["b_i"] = e - cfg.lambda2 * params.b_i[i]
    if params.variant.uses_features:
        out["w_u"] = e * st.user_mean(u) - cfg.lambda3 * params.w_u[u]
        out["w_i"] = e * st.service_mean(i) - cfg.lambda3 * params.w_i[i]
    slots = np.flatnonzero(valid[0])
    norm = 1.0 / math.sqrt(len(slots)) if len(slots) else 0.0
    out["w_uv"] = {
        int(params.neighbor_ids[u, s]): norm * e * resid[0, s] - cfg.lambda1 * params.w_nb[u, s]
        for s in slots
    }
    return out


def sgd_step(params, train, cfg, u, i, gamma1=None, gamma2=None):
    """Apply one compiled SGD update for the case ``(u, i)`` in place."""
    t = np.flatnonzero((train.users == u) & (train.services == i))
    if len(t) != 1:
        raise KeyError((u, i))
    _TrainingData(params, train).run(
        params, t, cfg.gamma1 if gamma1 is None else gamma1,
        cfg.gamma2 if gamma2 is None else gamma2, cfg,
    )


@dataclass(eq=False)
class NeighborhoodModel:
    """Trained parameters bundled with the data needed to predict."""

    params: NeighborhoodParams
    train: object
    index: SimilarityIndex

    @classmethod
    def fit(cls, train_matrix, variant, cfg=None, k=DEFAULT_K, clamp_max=DEFAULT_CLAMP):
        index = build_index(train_matrix, "user", k)
        params = train(train_matrix, variant, cfg, index, clamp_max)
        return cls(params, train_matrix, index)

    @property
    def k(self):
        return self.params.k

    def predict(self, u, i):
        return predict(self.params, u, i, self.train)

    def predict_many(self, users, services):
        return predict_many(self.params, users, services, self.train)

    def save(self, path):
        """Write the model.

        Besides the common records: ``k``, ``clamp_max`` (``none`` when
        disabled), ``residual_baseline frozen``, vectors ``b_u``/``b_i``/
        ``w_u``/``w_i`` as ``<key> <id> <value>``, ``neighbor <u> <v> <sim>``
        in rank order, and ``w_uv <u> <v> <value>``.
        """
        p = self.params
        with open(path, "w") as fh:
            modelio.write_header(fh, p.variant.value, self.train.shape, p.stats)
            fh.write(f"k {p.k}\n")
            fh.write(f"clamp_max {'none' if p.clamp_max is None else modelio.fmt(p.clamp_max)}\n")
            fh.write(f"residual_baseline {p.residual_baseline}\n")
            for key, vec in (("b_u", p.b_u), ("b_i", p.b_i), ("w_u", p.w_u), ("w_i", p.w_i)):
                for j in np.flatnonzero(vec):
                    fh.write(f"{key} {j} {modelio.fmt(vec[j])}\n")
            for u in range(self.index.size):
                for s in range(int(self.index.lengths[u])):
                    v = self.index.topk_ids[u, s]
                    fh.write(f"neighbor {u} {v} {modelio.fmt(self.index.topk_sims[u, s])}\n")
            for u, s in zip(*np.nonzero(p.neighbor_ids >= 0)):
                fh.write(f"w_uv {u} {p.neighbor_ids[u, s]} {modelio.fmt(p.w_nb[u, s])}\n")
            modelio.write_entries(fh, self.train)

    @classmethod
    def load(cls, path):
        rec = modelio.Records(path)
        variant = NbVariant(rec.scalar("kind"))
        k = rec.scalar("k", int)
        cm = rec.scalar("clamp_max")
        clamp_max = None if cm == "none" else float(cm)
        if rec.scalar("residual_baseline") != "frozen":
            raise ParseError(f"{path}: unsupported residual baseline")
        m, stats = rec.matrix_and_stats()
        nu, ns = m.shape
        width = max(0, min(k, nu - 1))
        ids = np.full((nu, width), -1, dtype=np.int64)
        sims = np.zeros((nu, width))
        lengths = np.zeros(nu, dtype=np.int64)
        for lineno, toks in rec.rows("neighbor"):
            u, v = int(toks[0]), int(toks[1])
            s = lengths[u]
            if s >= width:
                raise ParseError("too many neighbours", lineno)
            ids[u, s], sims[u, s] = v, float(toks[2])
            lengths[u] += 1
        for a in (ids, sims, lengths):
            a.setflags(write=False)
        values, mask = m.dense()
        index = SimilarityIndex("user", k, ids, sims, lengths, values, mask)
        params = NeighborhoodParams.zeros(variant, stats, index, clamp_max)
        params.b_u[:] = rec.vector("b_u", nu)
        params.b_i[:] = rec.vector("b_i", ns)
        params.w_u[:] = rec.vector("w_u", nu)
        params.w_i[:] = rec.vector("w_i", ns)
        slot = {(int(u), int(ids[u, s])): s for u, s in zip(*np.nonzero(ids >= 0))}
        for lineno, toks in rec.rows("w_uv"):
            key = (int(toks[0]), int(toks[1]))
            if key not in slot:
                raise ParseError(f"w_uv for non-neighbour pair {key}", lineno)
            params.w_nb[key[0], slot[key]] = float(toks[2])
        return cls(params.freeze(), m, index)
