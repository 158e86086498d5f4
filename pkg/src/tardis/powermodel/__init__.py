"""Per-job power prediction with a kNN-graph GCN."""

from .features import FEATURE_COLUMNS, FeaturePipeline, fit_pipeline
from .gcn import GcnModel, NonFiniteError, count_parameters, forward as gcn_forward, init_model
from .graph import JobGraph, build_knn_graph, graph_from_edges
from .training import (
    GnnPredictor,
    InsufficientJobsError,
    MeanPredictor,
    OraclePredictor,
    Predictor,
    TrainConfig,
    TrainHistory,
    TrainingDivergedError,
    baseline_predictor,
    load_checkpoint,
    predict,
    predict_windows,
    save_checkpoint,
    temporal_split,
    train,
)

__all__ = [
    "FEATURE_COLUMNS", "FeaturePipeline", "fit_pipeline",
    "GcnModel", "NonFiniteError", "count_parameters", "gcn_forward", "init_model",
    "JobGraph", "build_knn_graph", "graph_from_edges",
    "GnnPredictor", "InsufficientJobsError", "MeanPredictor", "OraclePredictor", "Predictor",
    "TrainConfig", "TrainHistory", "TrainingDivergedError", "baseline_predictor",
    "load_checkpoint", "predict", "predict_windows", "save_checkpoint", "temporal_split", "train",
]
