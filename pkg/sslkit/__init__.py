"""
sslkit - representation learning for long-tailed image classification.

Supervised weighted cross-entropy, swapped-prediction (prototype) pretraining
and supervised contrastive pretraining on a small numpy encoder, with linear
probing, stratified cross-validation and per-class metric reporting.
"""

__version__ = "0.1.0"
__author__ = "sslkit Contributors"

from .config import TrainConfig, resolve_train_config
from .data import LabeledDataset, generate_synthetic, ingest, stratified_kfold
from .training import linear_probe, train

__all__ = [
    "LabeledDataset",
    "TrainConfig",
    "__version__",
    "generate_synthetic",
    "ingest",
    "linear_probe",
    "resolve_train_config",
    "stratified_kfold",
    "train",
]
