"""Parametric-bias attention, KL-regularized action chunking and failure selection on a toy lift task."""
from .attention import FAILURE, SUCCESS, PBTable
from .env import DatasetManifest, Demonstration, generate_dataset
from .model import Checkpoint, Policy, PolicyConfig, load_checkpoint, save_checkpoint
from .training import train, train_multi_seed

__version__ = "0.1.0"

__all__ = [
    "FAILURE", "SUCCESS", "PBTable", "DatasetManifest", "Demonstration", "generate_dataset",
    "Checkpoint", "Policy", "PolicyConfig", "load_checkpoint", "save_checkpoint",
    "train", "train_multi_seed",
]
