"""Graph-attentive recurrent forecasting with per-variable importance read off the attention keys."""

__version__ = "0.1.0"

from .autodiff import NonFiniteError, ShapeError, Tape, Tensor, finite_difference_check
from .data import (DataError, MtsRecord, MtsWindow, Normalizer, SplitSpec, SyntheticConfig,
                   generate_synthetic, load_csv, make_windows, prepare)
from .interpret import (ImportanceRanking, ablation_oracle, dataset_importance, feature_map,
                        importance_matrix, static_ranking_check, trace_gaps)
from .metrics import evaluate, g_rmse, mae, mape, rmse, time_lag
from .model import GarnnModel, ModelConfig
from .training import FitResult, TrainConfig, fit, predict_batch

__all__ = [
    "DataError", "FitResult", "GarnnModel", "ImportanceRanking", "ModelConfig", "MtsRecord",
    "MtsWindow", "NonFiniteError", "Normalizer", "ShapeError", "SplitSpec", "SyntheticConfig",
    "Tape", "Tensor", "TrainConfig", "ablation_oracle", "dataset_importance", "evaluate",
    "feature_map", "finite_difference_check", "fit", "g_rmse", "generate_synthetic",
    "importance_matrix", "load_csv", "mae", "make_windows", "mape", "predict_batch", "prepare",
    "rmse", "static_ranking_check", "trace_gaps", "time_lag",
]
