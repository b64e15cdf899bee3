"""Graph Hawkes neural network for temporal knowledge graphs."""

from .model import GHNN, ModelConfig
from .tkg_store import Dataset, Direction, Quadruple, load_dataset, save_dataset
from .training import TrainConfig, Trainer, train

__all__ = ["GHNN", "ModelConfig", "Dataset", "Direction", "Quadruple", "load_dataset", "save_dataset",
           "TrainConfig", "Trainer", "train"]
__version__ = "0.1.0"
