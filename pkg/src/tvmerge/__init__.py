"""Merging fine-tuned checkpoints with task vectors and learned coefficients."""

from .adamerge import AdaMergeConfig, AdaMergeResult, Trajectory, adamerge_run
from .errors import TvMergeError
from .params import ParamSet, load_checkpoint, save_checkpoint
from .task_vectors import MergeCoefficients, TaskVector, compose, fixed_task_arithmetic, make_task_vector, phi

__version__ = "0.1.0"

__all__ = [
    "AdaMergeConfig", "AdaMergeResult", "MergeCoefficients", "ParamSet", "TaskVector", "Trajectory",
    "TvMergeError", "adamerge_run", "compose", "fixed_task_arithmetic", "load_checkpoint",
    "make_task_vector", "phi", "save_checkpoint",
]
