"""protocg: two-tower candidate generation with an adaptive number of user
interest embeddings and prototype-regularized item embeddings."""

from .autodiff import Tape, Tensor, backward
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = ["Tape", "Tensor", "backward", "TrainConfig", "train",
           "save_checkpoint", "load_checkpoint"]

__version__ = "0.1.0"
