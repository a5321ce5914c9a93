"""Command-line entry point.

    nbqos evaluate --data rt.txt --models table1 --densities 0.005,0.01 --seeds 1,2,3
    nbqos sweep-k  --data rt.txt --model nbmodel1 --k-values 0,20,80 --densities 0.005
    nbqos train    --data rt.txt --model nbmodel3 --density 0.1 --seed 42 --save m.txt
    nbqos predict  --load m.txt --pairs pairs.csv --out preds.csv
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field

import numpy as np

from . import evalharness as eh
from .dataset import load_matrix, split
from .errors import NbQosError, ParseError
from .mf_baselines import MfConfig, MfModel
from .nbmodel import NeighborhoodModel, TrainConfig
from .modelio import Records

COMMANDS = ("evaluate", "sweep-k", "train", "predict")


@dataclass
class RunSpec:
    command: str
    data_path: str = None
    format: str = "dense"
    models: list = field(default_factory=list)
    densities: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    k: int = None
    k_values: list = field(default_factory=list)
    options: eh.HarnessOptions = field(default_factory=eh.HarnessOptions)
    report_path: str = None
    save_path: str = None
    load_path: str = None
    pairs_path: str = None
    out_path: str = None
    deterministic_timing: bool = False
    jobs: int = 1


def _csv_of(cast, check=None, what="value"):
    def parse(text):
        try:
            vals = [cast(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {what} list {text!r}") from None
        if not vals:
            raise argparse.ArgumentTypeError("empty list")
        for v in vals:
            if check is not None and not check(v):
                raise argparse.ArgumentTypeError(f"{what} {v} out of range")
        return vals

    return parse


def _bounded(cast, lo=None, hi=None, lo_open=False):
    def parse(text):
        try:
            v = cast(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid number {text!r}") from None
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise argparse.ArgumentTypeError(f"{v} out of range")
        if hi is not None and v > hi:
            raise argparse.ArgumentTypeError(f"{v} out of range")
        return v

    return parse


_density = lambda d: 0.0 < d < 1.0  # noqa: E731
_positive = _bounded(float, 0.0, lo_open=True)
_nonneg_int = _bounded(int, 0)


def _models(text):
    names = []
    for t in text.split(","):
        t = t.strip().lower()
        if not t:
            continue
        if t == "table1":
            names.extend(eh.TABLE1_MODELS)
        elif t in eh.ALL_MODELS:
            names.append(t)
        else:
            raise argparse.ArgumentTypeError(
                f"unknown model {t!r} (choose from {', '.join(eh.ALL_MODELS)}, table1)"
            )
    if not names:
        raise argparse.ArgumentTypeError("empty model list")
    return names


def _add_data(p):
    p.add_argument("--data", required=True, help="QoS matrix file")
    p.add_argument("--format", choices=("dense", "triplet"), default="dense")


def _add_hyper(p):
    g = p.add_argument_group("hyperparameters")
    g.add_argument("--k", type=_nonneg_int, help="neighbourhood size of the learned models (80)")
    g.add_argument("--k-user", type=_nonneg_int, default=10)
    g.add_argument("--k-service", type=_nonneg_int, default=50)
    g.add_argument("--blend", type=_bounded(float, 0.0, 1.0), default=0.5, help="UIPCC lambda")
    g.add_argument("--epochs", type=_nonneg_int, help="epoch cap for SGD models (100)")
    for name in ("lambda1", "lambda2", "lambda3", "gamma1", "gamma2"):
        g.add_argument(f"--{name}", type=_positive, default=0.001)
    g.add_argument("--decay", type=_bounded(float, 0.0, 1.0, lo_open=True), default=0.9)
    g.add_argument("--early-stop-tol", type=_bounded(float, 0.0), default=1e-5)
    g.add_argument("--factors", type=_bounded(int, 1), default=10)
    g.add_argument("--mf-lr", type=_positive, default=0.01)
    g.add_argument("--mf-lambda", type=_positive, default=0.001)
    g.add_argument("--clamp-max", type=_positive, default=20.0)


def _add_out(p):
    p.add_argument("--report", help="CSV report path")
    p.add_argument("--deterministic-timing", action="store_true", help="zero the timing column")
    p.add_argument("--jobs", type=_bounded(int, 1), default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="nbqos", description="Neighbourhood-model QoS prediction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("evaluate", help="density grid over several models")
    _add_data(p)
    p.add_argument("--models", type=_models, required=True)
    p.add_argument("--densities", type=_csv_of(float, _density, "density"),
                   default=list(eh.TABLE1_DENSITIES))
    p.add_argument("--seeds", type=_csv_of(int, what="seed"), default=[42])
    _add_hyper(p)
    _add_out(p)

    p = sub.add_parser("sweep-k", help="top-k sweep for one neighbourhood model")
    _add_data(p)
    p.add_argument("--model", choices=eh.NB_MODELS, required=True)
    p.add_argument("--k-values", type=_csv_of(int, lambda k: k >= 0, "k"), required=True)
    p.add_argument("--densities", type=_csv_of(float, _density, "density"), default=[0.005, 0.01])
    p.add_argument("--seed", type=int, default=42)
    _add_hyper(p)
    _add_out(p)

    p = sub.add_parser("train", help="fit one model and save it")
    _add_data(p)
    p.add_argument("--model", choices=eh.NB_MODELS + eh.MF_MODELS, required=True)
    p.add_argument("--density", type=_bounded(float, 0.0, 1.0, lo_open=True),
                   help="train on a sampled fraction (default: all entries)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--save", required=True, help="model output path")
    _add_hyper(p)

    p = sub.add_parser("predict", help="predict pairs with a saved model")
    p.add_argument("--load", required=True, help="model file written by 'train'")
    p.add_argument("--pairs", required=True, help="CSV with user_id,service_id[,value]")
    p.add_argument("--out", help="prediction CSV path (default: stdout)")
    return parser


def _options(ns):
    nb = TrainConfig(
        lambda1=ns.lambda1, lambda2=ns.lambda2, lambda3=ns.lambda3,
        gamma1=ns.gamma1, gamma2=ns.gamma2, decay=ns.decay,
        early_stop_tol=ns.early_stop_tol,
        **({} if ns.epochs is None else {"epochs": ns.epochs}),
    )
    mf = MfConfig(
        factors=ns.factors, learning_rate=ns.mf_lr,
        lambda_u=ns.mf_lambda, lambda_v=ns.mf_lambda, lambda_b=ns.mf_lambda,
        early_stop_tol=ns.early_stop_tol,
        **({} if ns.epochs is None else {"epochs": ns.epochs}),
    )
    return eh.HarnessOptions(
        k_user=ns.k_user, k_service=ns.k_service, blend=ns.blend,
        nb_k=80 if ns.k is None else ns.k,
        nb_config=nb, mf_config=mf, clamp_max=ns.clamp_max,
    )


def parse_args(argv=None):
    """Parse ``argv`` into a RunSpec; exits with status 2 on usage errors."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        parser.exit(2, "nbqos: error: a command is required\n")
    ns = parser.parse_args(argv)
    if ns.verbose:
        logging.basicConfig(level=logging.INFO)
    spec = RunSpec(command=ns.command)
    if ns.command == "predict":
        spec.load_path, spec.pairs_path, spec.out_path = ns.load, ns.pairs, ns.out
        return spec
    spec.data_path, spec.format = ns.data, ns.format
    spec.options = _options(ns)
    spec.k = ns.k
    if ns.command == "evaluate":
        spec.models, spec.densities, spec.seeds = ns.models, ns.densities, ns.seeds
    elif ns.command == "sweep-k":
        spec.models, spec.k_values = [ns.model], ns.k_values
        spec.densities, spec.seeds = ns.densities, [ns.seed]
    else:
        spec.models, spec.save_path, spec.seeds = [ns.model], ns.save, [ns.seed]
        spec.densities = [] if ns.density is None else [ns.density]
    if ns.command in ("evaluate", "sweep-k"):
        spec.report_path = ns.report
        spec.deterministic_timing = ns.deterministic_timing
        spec.jobs = ns.jobs
    return spec


def load_model(path):
    kind = Records(path).scalar("kind")
    if kind in eh.NB_MODELS:
        return NeighborhoodModel.load(path)
    if kind in eh.MF_MODELS:
        return MfModel.load(path)
    raise ParseError(f"{path}: unknown model kind {kind!r}")


def _read_pairs(path):
    us, ss, vs = [], [], []
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if not rows or [c.strip() for c in rows[0][:2]] != ["user_id", "service_id"]:
        raise ParseError(f"{path}: missing header 'user_id,service_id[,value]'", 1)
    has_value = len(rows[0]) >= 3
    for lineno, r in enumerate(rows[1:], start=2):
        try:
            us.append(int(r[0]))
            ss.append(int(r[1]))
            if has_value:
                vs.append(float(r[2]))
        except (ValueError, IndexError):
            raise ParseError(f"bad row {r!r}", lineno) from None
    return np.array(us, dtype=np.int64), np.array(ss, dtype=np.int64), (vs if has_value else None)


def _write_report(spec, report):
    text = report.to_csv(deterministic_timing=spec.deterministic_timing)
    if spec.report_path:
        with open(spec.report_path, "w", newline="") as fh:
            fh.write(text)
    print(report.format_table())
    for r in report.failures:
        print(f"FAILED {r.model} density={r.density} seed={r.seed}: {r.error}", file=sys.stderr)
    return 0 if report.ok else 1


def execute(spec):
    """Run ``spec``; returns the process exit status."""
    if spec.command == "predict":
        model = load_model(spec.load_path)
        users, services, truth = _read_pairs(spec.pairs_path)
        nu, ns = model.params.stats.num_users, model.params.stats.num_services
        if len(users) and (users.min() < 0 or users.max() >= nu or services.min() < 0
                           or services.max() >= ns):
            raise ParseError(f"{spec.pairs_path}: id outside the model's {nu}x{ns} shape")
        pred = model.predict_many(users, services)
        out = open(spec.out_path, "w", newline="") if spec.out_path else sys.stdout
        try:
            out.write("user_id,service_id,prediction\n")
            for u, i, p in zip(users.tolist(), services.tolist(), pred.tolist()):
                out.write(f"{u},{i},{p!r}\n")
        finally:
            if out is not sys.stdout:
                out.close()
        if truth is not None and len(truth):
            err = np.asarray(truth) - pred
            print(f"MAE {np.mean(np.abs(err)):.4f} RMSE {np.sqrt(np.mean(err ** 2)):.4f}",
                  file=sys.stderr)
        return 0

    source = load_matrix(spec.data_path, spec.format)
    if spec.command == "evaluate":
        report = eh.run_grid(source, spec.models, spec.densities, spec.seeds,
                             spec.options, spec.jobs)
        return _write_report(spec, report)
    if spec.command == "sweep-k":
        report = eh.topk_sweep(source, spec.models[0], spec.densities, spec.k_values,
                               spec.seeds[0], spec.options, spec.jobs)
        return _write_report(spec, report)

    sampled = spec.densities and spec.densities[0] < 1.0
    train_m = split(source, spec.densities[0], spec.seeds[0]).train if sampled else source
    model, _ = eh.fit_model(spec.models[0], train_m, spec.options)
    model.save(spec.save_path)
    print(f"saved {spec.models[0]} trained on {len(train_m)} entries to {spec.save_path}")
    return 0


def main(argv=None):
    spec = parse_args(argv)
    try:
        return execute(spec)
    except (NbQosError, OSError, ValueError) as exc:
        print(f"nbqos: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
