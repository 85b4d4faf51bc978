"""Intervention-trained infrared/visible image fusion."""

from .data import ImagePair, PairDataset, load_image_pair
from .model import FusionNet, ModelConfig
from .trainer import TrainConfig, train

__all__ = [
    "FusionNet",
    "ImagePair",
    "ModelConfig",
    "PairDataset",
    "TrainConfig",
    "load_image_pair",
    "train",
]
__version__ = "0.1.0"
