"""Sparse-autoencoder pretrained 3D/2D convolutional features for volume classification."""

from .autoencoder import SparseAutoencoder
from .classifier import MlpClassifier
from .convnet import ConvFeatureBank, VolumeFeaturizer
from .exceptions import (
    DegenerateInputError,
    DimensionError,
    DivergedError,
    FormatError,
    ParameterError,
    VoxelnetError,
)
from .tensor_core import Rng

__all__ = [
    "ConvFeatureBank",
    "DegenerateInputError",
    "DimensionError",
    "DivergedError",
    "FormatError",
    "MlpClassifier",
    "ParameterError",
    "Rng",
    "SparseAutoencoder",
    "VolumeFeaturizer",
    "VoxelnetError",
]

__version__ = "0.1.0"
