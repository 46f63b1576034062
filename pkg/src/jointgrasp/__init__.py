"""Dual-branch category/grasp recognition with a consistency-regularized joint loss."""

from .dualnet import ArchConfig, ModelParams, forward, init_model, predict
from .errors import ConfigError, ContractError, DimensionError, JointGraspError, OracleError, TrainingAborted
from .loss import MISSING, estimate_cond_matrix, gamma, jce_loss, jcear_loss
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "MISSING",
    "ArchConfig",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "JointGraspError",
    "ModelParams",
    "OracleError",
    "TrainConfig",
    "TrainingAborted",
    "estimate_cond_matrix",
    "forward",
    "gamma",
    "init_model",
    "jce_loss",
    "jcear_loss",
    "predict",
    "train",
]
