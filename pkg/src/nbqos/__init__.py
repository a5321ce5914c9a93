"""Learned neighbourhood models and baselines for QoS prediction."""

from .dataset import (
    MatrixStats,
    QosMatrix,
    TrainTestSplit,
    compute_stats,
    load_matrix,
    save_triplet,
    split,
)
from .errors import (
    DegenerateSplitError,
    EmptyDataError,
    LeakageError,
    NbQosError,
    ParseError,
    TrainingDivergedError,
)
from .evalharness import EvalReport, Metrics, evaluate, run_grid, topk_sweep
from .heuristics import HeuristicModel, fit_heuristic
from .mf_baselines import MfConfig, MfModel, MfParams, mf_predict, mf_train
from .nbmodel import (
    NbVariant,
    NeighborhoodModel,
    NeighborhoodParams,
    TrainConfig,
    baseline_component,
    objective_value,
    predict,
    train,
)
from .similarity import SimilarityIndex, build_index, neighbor_set, pcc

__version__ = "0.1.0"
