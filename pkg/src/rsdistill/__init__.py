"""Redundancy suppression distillation on a small numpy autodiff engine."""

from ._build import BUILD_ID, __version__
from .analysis import ablation_report, cka_grid, linear_cka
from .data import Dataset, parse_data_uri, synth_gaussian_task
from .models import FrozenModel, ModelSpec, build, load_model, save_model
from .rsd import (AadModule, RsdConfig, aad_param_count, expanded_dim, full_objective,
                  pearson_matrix, rsd_loss)
from .tensor import Tensor
from .trainer import TrainConfig, default_config, distill, evaluate, sweep, train_teacher

__all__ = [
    "BUILD_ID", "__version__", "AadModule", "Dataset", "FrozenModel", "ModelSpec", "RsdConfig",
    "Tensor", "TrainConfig", "aad_param_count", "ablation_report", "build", "cka_grid",
    "default_config", "distill", "evaluate", "expanded_dim", "full_objective", "linear_cka",
    "load_model", "parse_data_uri", "pearson_matrix", "rsd_loss", "save_model", "sweep",
    "synth_gaussian_task", "train_teacher",
]
