"""MAE/RMSE evaluation and the density / top-k experiment grids."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import heuristics
from .dataset import split
from .errors import EmptyDataError, LeakageError, NbQosError
from .mf_baselines import MfConfig, MfModel
from .nbmodel import DEFAULT_K, NbVariant, NeighborhoodModel, TrainConfig

log = logging.getLogger(__name__)

NB_MODELS = tuple(v.value for v in NbVariant)
MF_MODELS = ("pmf", "biasedmf")
NOT_REPRODUCED = ("nmf",)
ALL_MODELS = heuristics.KINDS + MF_MODELS + NOT_REPRODUCED + NB_MODELS
TABLE1_MODELS = (
    "gmean", "umean", "imean", "upcc", "ipcc", "uipcc",
    "pmf", "nmf", "biasedmf", "nbmodel1", "nbmodel2", "nbmodel3",
)
TABLE1_DENSITIES = (0.005, 0.01, 0.05, 0.10)
CSV_HEADER = ("model", "density", "seed", "k", "mae", "rmse", "train_seconds")


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    n: int


def _predictions(predictor, users, services):
    if hasattr(predictor, "predict_many"):
        return np.asarray(predictor.predict_many(users, services), dtype=np.float64)
    return np.asarray(predictor(users, services), dtype=np.float64)


def evaluate(predictor, test):
    """MAE and RMSE of ``predictor`` over every entry of ``test``.

    ``predictor`` is either an object with ``predict_many(users, services)``
    or a callable with the same signature.
    """
    if len(test) == 0:
        raise EmptyDataError("empty test set")
    pred = _predictions(predictor, test.users, test.services)
    if pred.shape != test.values.shape:
        raise ValueError("predictor returned the wrong number of values")
    if not np.all(np.isfinite(pred)):
        raise ValueError("predictor returned non-finite values")
    err = test.values - pred
    mae = float(np.mean(np.abs(err)))
    rmse = math.sqrt(float(np.mean(err * err)))
    return Metrics(mae, rmse, len(test))


@dataclass
class HarnessOptions:
    """Model hyperparameters used by the grids."""

    k_user: int = heuristics.DEFAULT_USER_K
    k_service: int = heuristics.DEFAULT_SERVICE_K
    blend: float = 0.5
    nb_k: int = DEFAULT_K
    nb_config: TrainConfig = field(default_factory=TrainConfig)
    mf_config: MfConfig = field(default_factory=MfConfig)
    clamp_max: float | None = 20.0


def fit_model(name, train, options=None, k=None):
    """Fit the named model on ``train`` and return ``(model, k_used)``."""
    o = options or HarnessOptions()
    if name in heuristics.STAT_KINDS:
        return heuristics.fit_heuristic(train, name), 0
    if name in heuristics.CF_KINDS:
        ku = o.k_user if k is None else k
        ks = o.k_service if k is None else k
        m = heuristics.fit_heuristic(train, name, ku, ks, o.blend)
        return m, (ks if name == "ipcc" else ku)
    if name in MF_MODELS:
        m = MfModel.fit(train, name, o.mf_config)
        m.params.clamp_max = o.clamp_max
        return m, 0
    if name in NB_MODELS:
        kk = o.nb_k if k is None else k
        return NeighborhoodModel.fit(train, name, o.nb_config, kk, o.clamp_max), kk
    if name in NOT_REPRODUCED:
        raise NotImplementedError(f"{name} is not reproduced")
    raise ValueError(f"unknown model {name!r}")


@dataclass
class EvalRow:
    model: str
    density: float
    seed: object
    k: int
    mae: float = math.nan
    rmse: float = math.nan
    train_seconds: float = 0.0
    status: str = "ok"
    error: str = ""

    @property
    def ok(self):
        return self.status == "ok"


def _fmt(x, digits):
    return "nan" if not math.isfinite(x) else f"{x:.{digits}f}"


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    @property
    def ok(self):
        return all(r.status in ("ok", "not_reproduced") for r in self.rows)

    @property
    def failures(self):
        return [r for r in self.rows if r.status == "failed"]

    def mean_rows(self):
        """Per (model, density, k) means over seeds, when there are several seeds."""
        groups = {}
        for r in self.rows:
            groups.setdefault((r.model, r.density, r.k), []).append(r)
        out = []
        for (model, density, k), rows in groups.items():
            if len(rows) < 2:
                continue
            good = [r for r in rows if r.ok]
            if all(r.status == "not_reproduced" for r in rows):
                out.append(EvalRow(model, density, "mean", k, status="not_reproduced"))
                continue
            if len(good) != len(rows):
                out.append(EvalRow(model, density, "mean", k, status="incomplete"))
                continue
            out.append(
                EvalRow(
                    model, density, "mean", k,
                    mae=float(np.mean([r.mae for r in good])),
                    rmse=float(np.mean([r.rmse for r in good])),
                    train_seconds=float(np.mean([r.train_seconds for r in good])),
                )
            )
        return out

    def to_csv(self, fh=None, deterministic_timing=False):
        """Write per-seed rows followed by mean rows; returns the text if ``fh`` is None."""
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in list(self.rows) + self.mean_rows():
            secs = 0.0 if deterministic_timing else r.train_seconds
            w.writerow([
                r.model, f"{r.density:.4f}", r.seed, r.k,
                _fmt(r.mae, 6), _fmt(r.rmse, 6), f"{secs:.4f}",
            ])
        if fh is None:
            return buf.getvalue()

    def format_table(self):
        lines = [f"{'model':<10} {'MD':>7} {'seed':>5} {'k':>4} {'MAE':>8} {'RMSE':>8} {'secs':>8}"]
        for r in list(self.rows) + self.mean_rows():
            if r.ok:
                stats = f"{r.mae:8.4f} {r.rmse:8.4f} {r.train_seconds:8.2f}"
            else:
                stats = r.status.replace("_", " ")
            lines.append(
                f"{r.model:<10} {r.density * 100:6.2f}% {str(r.seed):>5} {r.k:>4} {stats}"
            )
        return "\n".join(lines)


def check_isolation(train, test):
    """Raise LeakageError unless train and test share no (user, service) pair."""
    if train.shape != test.shape:
        raise LeakageError("train and test shapes differ")
    nu = np.int64(train.num_services)
    a = train.users * nu + train.services
    b = test.users * nu + test.services
    overlap = np.intersect1d(a, b)
    if len(overlap):
        raise LeakageError(f"{len(overlap)} test pairs are present in training data")


def evaluate_split(name, tts, options=None, k=None):
    """Fit on ``tts.train`` and score on ``tts.test``; returns an EvalRow."""
    check_isolation(tts.train, tts.test)
    t0 = time.perf_counter()
    model, k_used = fit_model(name, tts.train, options, k)
    secs = time.perf_counter() - t0
    m = evaluate(model, tts.test)
    return EvalRow(name, tts.density, tts.seed, k_used, m.mae, m.rmse, secs)


def _row_task(args):
    source, name, density, seed, options, k = args
    k_label = 0 if k is None else k
    if name in NOT_REPRODUCED:
        return EvalRow(name, density, seed, k_label, status="not_reproduced")
    try:
        tts = split(source, density, seed)
        return evaluate_split(name, tts, options, k)
    except (NbQosError, ValueError, ArithmeticError) as exc:
        log.warning("%s at density %s seed %s failed: %s", name, density, seed, exc)
        return EvalRow(name, density, seed, k_label, status="failed", error=str(exc))


def _run_tasks(tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [_row_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_row_task, tasks))


def _check_densities(densities):
    for d in densities:
        if not 0.0 < d < 1.0:
            raise ValueError(f"density must lie in (0, 1), got {d}")


def run_grid(source, models, densities, seeds, options=None, jobs=1):
    """One row per (model, density, seed), ordered by that key.

    Splits, statistics and indexes are derived from the training part only.
    Row failures are recorded and the remaining rows still run.
    """
    _check_densities(densities)
    for name in models:
        if name not in ALL_MODELS:
            raise ValueError(f"unknown model {name!r}")
    tasks = [
        (source, name, d, s, options, None)
        for name in models for d in densities for s in seeds
    ]
    return EvalReport(_run_tasks(tasks, jobs))


def topk_sweep(source, variant, densities, k_values, seed, options=None, jobs=1):
    """One row per (density, k) for a neighbourhood variant."""
    if not k_values:
        raise ValueError("k_values must not be empty")
    _check_densities(densities)
    name = NbVariant(variant).value
    tasks = [(source, name, d, seed, options, k) for d in densities for k in k_values]
    return EvalReport(_run_tasks(tasks, jobs))
