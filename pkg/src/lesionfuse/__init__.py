"""Multi-resolution transfer-learning pipeline for ternary skin-lesion
classification: dihedral test-time augmentation, three-level probability
fusion, and one-vs-all ROC/AUC evaluation."""

__version__ = "0.1.0"

from .catalog import DatasetManifest, ImageRecord, load_manifest, verify_dataset, write_manifest
from .dihedral import ELEMENTS, DihedralElement, apply, orbit
from .evaluation import EvalReport, evaluate_table, roc_auc
from .fusion import average_tables, fuse_level1, fuse_level2, fuse_level3, fuse_single_resolution
from .models import AdaptedModel, BackboneSpec, build_model, trainable_parameter_report
from .prediction import predict_dataset, tta_predict
from .preprocess import (PreprocessConfig, PreprocessedTensor, grayworld, materialize_cache,
                         preprocess_pipeline, resize_bicubic, subtract_mean)
from .tables import PredictionStore, PredictionTable, read_table, write_table
from .training import OptimizerSpec, RunResult, TrainConfig, lr_at_epoch, run_matrix, train_run

__all__ = [
    "AdaptedModel", "BackboneSpec", "DatasetManifest", "DihedralElement",
    "ELEMENTS", "EvalReport", "ImageRecord", "OptimizerSpec", "PredictionStore",
    "PredictionTable", "PreprocessConfig", "PreprocessedTensor", "RunResult",
    "TrainConfig", "apply", "average_tables", "build_model", "evaluate_table",
    "fuse_level1", "fuse_level2", "fuse_level3", "fuse_single_resolution",
    "grayworld", "load_manifest", "lr_at_epoch", "materialize_cache", "orbit",
    "predict_dataset", "preprocess_pipeline", "read_table", "resize_bicubic",
    "roc_auc", "run_matrix", "subtract_mean", "tta_predict",
    "trainable_parameter_report", "train_run", "verify_dataset", "write_manifest",
    "write_table",
]
