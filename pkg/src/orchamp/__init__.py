"""Orchestrated approximate message passing for multimodal low-rank recovery."""
from .amp import run, run_config
from .dataset_io import MultimodalDataset, load_matrix, load_model, save_matrix, save_model
from .priors import DiscretePrior, GaussianMixturePrior, LinearGaussianChannel
from .predict import Query, predict_set

__version__ = "0.1.0"

__all__ = [
    "DiscretePrior",
    "GaussianMixturePrior",
    "LinearGaussianChannel",
    "MultimodalDataset",
    "Query",
    "load_matrix",
    "load_model",
    "predict_set",
    "run",
    "run_config",
    "save_matrix",
    "save_model",
]
