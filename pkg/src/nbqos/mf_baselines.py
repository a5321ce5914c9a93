"""Matrix-factorization baselines: PMF and BiasedMF trained by SGD.

PMF predicts ``p_u . q_i``; BiasedMF predicts ``mu + b_u + b_i + p_u . q_i``
with ``mu`` the frozen training mean.  Factors start uniform in
``[-init_scale, init_scale]`` and biases at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import modelio
from ._jit import njit
from .dataset import compute_stats
from .errors import EmptyDataError, ParseError, TrainingDivergedError

KINDS = ("pmf", "biasedmf")


@dataclass
class MfConfig:
    factors: int = 10
    lambda_u: float = 0.001
    lambda_v: float = 0.001
    lambda_b: float = 0.001
    learning_rate: float = 0.01
    decay: float = 1.0
    epochs: int = 100
    early_stop_tol: float = 1e-5
    # plateau checks start here; tiny initial factors sit near a saddle
    min_epochs: int = 20
    init_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.factors < 1:
            raise ValueError("factors must be at least 1")
        for name in ("lambda_u", "lambda_v", "lambda_b", "learning_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass(eq=False)
class MfParams:
    kind: str
    stats: object
    p: np.ndarray
    q: np.ndarray
    b_u: np.ndarray
    b_i: np.ndarray
    clamp_max: float | None = 20.0
    history: list = field(default_factory=list)

    @property
    def factors(self):
        return self.p.shape[1]

    @property
    def biased(self):
        return self.kind == "biasedmf"

    def arrays(self):
        return (self.p, self.q, self.b_u, self.b_i)

    def freeze(self):
        for a in self.arrays():
            a.setflags(write=False)
        return self


def _raw(params, users, services):
    out = np.einsum("nf,nf->n", params.p[users], params.q[services])
    if params.biased:
        out = out + params.stats.global_mean + params.b_u[users] + params.b_i[services]
    return out


def mf_predict_many(params, users, services):
    """Predictions clamped to ``[0, clamp_max]``; cold ids get the training mean."""
    users = np.asarray(users, dtype=np.int64)
    services = np.asarray(services, dtype=np.int64)
    st = params.stats
    out = _raw(params, users, services)
    cold = (st.user_counts[users] == 0) | (st.service_counts[services] == 0)
    out = np.where(cold, st.global_mean, out)
    if params.clamp_max is not None:
        out = np.clip(out, 0.0, params.clamp_max)
    return out


def mf_predict(params, u, i):
    return float(mf_predict_many(params, [u], [i])[0])


@njit
def _mf_epoch(order, eu, ei, er, mu, biased, p, q, bu, bi, lr, lu, lv, lb):
    nf = p.shape[1]
    for t in order:
        u = eu[t]
        i = ei[t]
        pred = 0.0
        for f in range(nf):
            pred += p[u, f] * q[i, f]
        if biased:
            pred += mu + bu[u] + bi[i]
        e = er[t] - pred
        if biased:
            bu[u] += lr * (e - lb * bu[u])
            bi[i] += lr * (e - lb * bi[i])
        for f in range(nf):
            pu = p[u, f]
            qi = q[i, f]
            p[u, f] += lr * (e * qi - lu * pu)
            q[i, f] += lr * (e * pu - lv * qi)


def _run(params, train, order, lr, cfg):
    _mf_epoch(
        np.ascontiguousarray(order, dtype=np.int64),
        np.ascontiguousarray(train.users), np.ascontiguousarray(train.services),
        np.ascontiguousarray(train.values), float(params.stats.global_mean),
        params.biased, params.p, params.q, params.b_u, params.b_i,
        float(lr), cfg.lambda_u, cfg.lambda_v, cfg.lambda_b,
    )


def init_params(train, kind, cfg):
    if kind not in KINDS:
        raise ValueError(f"unknown MF kind {kind!r}")
    stats = compute_stats(train)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    s = cfg.init_scale
    p = rng.uniform(-s, s, (train.num_users, cfg.factors))
    q = rng.uniform(-s, s, (train.num_services, cfg.factors))
    return MfParams(kind, stats, p, q, np.zeros(train.num_users), np.zeros(train.num_services))


def _train_rmse(params, train):
    with np.errstate(over="ignore", invalid="ignore"):
        e = train.values - _raw(params, train.users, train.services)
        return math.sqrt(np.mean(e * e))


def mf_train(train, kind, cfg=None, callback=None):
    """Fit PMF or BiasedMF by SGD over shuffled training entries."""
    if len(train) == 0:
        raise EmptyDataError("cannot train on an empty matrix")
    cfg = cfg or MfConfig()
    params = init_params(train, kind, cfg)
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    lr = cfg.learning_rate
    prev = _train_rmse(params, train)
    for epoch in range(1, cfg.epochs + 1):
        _run(params, train, rng.permutation(len(train)), lr, cfg)
        ok = all(np.all(np.isfinite(a)) for a in params.arrays())
        rmse = _train_rmse(params, train) if ok else math.nan
        if not math.isfinite(rmse):
            raise TrainingDivergedError(epoch, "non-finite parameter")
        params.history.append(rmse)
        if callback is not None:
            callback(epoch, params)
        lr *= cfg.decay
        if epoch >= cfg.min_epochs and prev - rmse < cfg.early_stop_tol:
            break
        prev = rmse
    return params.freeze()


def mf_objective(params, train, cfg):
    """Regularized squared error with per-case regularization (SGD's objective)."""
    u, i = train.users, train.services
    e = train.values - _raw(params, u, i)
    total = float(e @ e)
    total += cfg.lambda_u * float(np.sum(params.p[u] ** 2))
    total += cfg.lambda_v * float(np.sum(params.q[i] ** 2))
    if params.biased:
        total += cfg.lambda_b * float(np.sum(params.b_u[u] ** 2 + params.b_i[i] ** 2))
    return total


def mf_directions(params, train, cfg, u, i):
    """Bracketed SGD update terms for the case ``(u, i)``."""
    e = train.entries[(u, i)] - float(_raw(params, np.array([u]), np.array([i]))[0])
    out = {
        "p_u": e * params.q[i] - cfg.lambda_u * params.p[u],
        "q_i": e * params.p[u] - cfg.lambda_v * params.q[i],
    }
    if params.biased:
        out["b_u"] = e - cfg.lambda_b * params.b_u[u]
        out["b_i"] = e - cfg.lambda_b * params.b_i[i]
    return out


def mf_step(params, train, cfg, u, i, lr=None):
    t = np.flatnonzero((train.users == u) & (train.services == i))
    if len(t) != 1:
        raise KeyError((u, i))
    _run(params, train, t, cfg.learning_rate if lr is None else lr, cfg)


@dataclass(eq=False)
class MfModel:
    params: MfParams

    @classmethod
    def fit(cls, train, kind, cfg=None):
        return cls(mf_train(train, kind, cfg))

    k = 0

    def predict(self, u, i):
        return mf_predict(self.params, u, i)

    def predict_many(self, users, services):
        return mf_predict_many(self.params, users, services)

    def save(self, path):
        """Write the model: ``factors``, ``clamp_max``, ``b_u``/``b_i`` vectors,
        and one ``p <u> <f values>`` / ``q <i> <f values>`` line per id."""
        pr = self.params
        st = pr.stats
        with open(path, "w") as fh:
            modelio.write_header(fh, pr.kind, (len(pr.p), len(pr.q)), st)
            fh.write(f"factors {pr.factors}\n")
            fh.write(f"clamp_max {'none' if pr.clamp_max is None else modelio.fmt(pr.clamp_max)}\n")
            for key, vec in (("b_u", pr.b_u), ("b_i", pr.b_i)):
                for j in np.flatnonzero(vec):
                    fh.write(f"{key} {j} {modelio.fmt(vec[j])}\n")
            for key, mat in (("p", pr.p), ("q", pr.q)):
                for j, row in enumerate(mat):
                    fh.write(f"{key} {j} " + " ".join(modelio.fmt(x) for x in row) + "\n")

    @classmethod
    def load(cls, path):
        rec = modelio.Records(path)
        kind = rec.scalar("kind")
        if kind not in KINDS:
            raise ParseError(f"{path}: not an MF model ({kind})")
        nf = rec.scalar("factors", int)
        cm = rec.scalar("clamp_max")
        _, stats = rec.matrix_and_stats()
        nu, ns = stats.num_users, stats.num_services
        mats = {"p": np.zeros((nu, nf)), "q": np.zeros((ns, nf))}
        for key, mat in mats.items():
            for lineno, toks in rec.rows(key):
                if len(toks) != nf + 1:
                    raise ParseError(f"bad {key} record", lineno)
                mat[int(toks[0])] = [float(t) for t in toks[1:]]
        params = MfParams(
            kind, stats, mats["p"], mats["q"], rec.vector("b_u", nu), rec.vector("b_i", ns),
            None if cm == "none" else float(cm),
        )
        return cls(params.freeze())
