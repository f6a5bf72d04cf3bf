"""erclab: emotion recognition in conversations on precomputed features.

Subpackages are imported lazily by callers; the names below are the usual
entry points.
"""
from erclab.datamodel import Dataset, FeatureMatrix, load_feature_matrix, load_manifest, save_feature_matrix
from erclab.errors import (ConfigError, FeatureFormatError, ManifestError, NoPositivePairsError,
                           StageOrderError, TrainingDivergedError, ValidationError)
from erclab.metrics import MetricReport, ccc, classification_report

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Dataset", "FeatureFormatError", "FeatureMatrix", "ManifestError", "MetricReport",
    "NoPositivePairsError", "StageOrderError", "TrainingDivergedError", "ValidationError", "ccc",
    "classification_report", "load_feature_matrix", "load_manifest", "save_feature_matrix",
]
