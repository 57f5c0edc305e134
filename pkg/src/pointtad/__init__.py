"""Sparse query-point temporal action detection on a small numpy autodiff core."""

from .data import SyntheticConfig, generate_dataset, load_dataset, save_dataset
from .decoder import DecoderConfig, PointTADModel
from .estimator import DenseToSparse, PointTADDetector
from .structures import ActionInstance, ClassDurationStats

__version__ = "0.1.0"

__all__ = ["ActionInstance", "ClassDurationStats", "DecoderConfig", "DenseToSparse",
           "PointTADDetector", "PointTADModel", "SyntheticConfig", "generate_dataset",
           "load_dataset", "save_dataset"]
