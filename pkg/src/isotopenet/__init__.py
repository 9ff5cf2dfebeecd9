"""IsotopeNet: a compact 1D convolutional classifier for imaging mass spectra.

Everything is implemented on numpy: layer kernels with hand-written
gradients, network assembly, training, a ROC/LDA reference pipeline,
sensitivity maps and TMA-level cross-validation.
"""

__version__ = "0.1.0"

from .data import Dataset, CohortMeta, FoldPlan, load_dataset, make_fold_plan, save_dataset, tic_normalize
from .model import (
    NetworkSpec,
    NetworkState,
    build_isotopenet,
    build_residualnet,
    forward,
    load_state,
    predict,
    predict_proba,
    save_state,
)
from .training import TrainConfig, train

__all__ = [
    "CohortMeta", "Dataset", "FoldPlan", "NetworkSpec", "NetworkState", "TrainConfig",
    "build_isotopenet", "build_residualnet", "forward", "load_dataset", "load_state",
    "make_fold_plan", "predict", "predict_proba", "save_dataset", "save_state",
    "tic_normalize", "train",
]
