"""From-scratch recurrent and dense autoencoders in numpy."""
from .layers import lstm_cell_forward, sigmoid
from .model import (AeModel, DropoutMask, apply_last_column_mask, corrupt, desk_sizes, load_model,
                    save_model)
from .train import Adam, TrainConfig, TrainHistory, TrainingDivergedError, gradient_check, train

__all__ = [
    "AeModel", "Adam", "DropoutMask", "TrainConfig", "TrainHistory", "TrainingDivergedError",
    "apply_last_column_mask", "corrupt", "desk_sizes", "gradient_check", "load_model",
    "lstm_cell_forward", "save_model", "sigmoid", "train",
]
