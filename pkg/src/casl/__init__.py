"""Sparse-autoencoder concept alignment and steering on a toy diffusion backbone."""

from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    LockError,
    MissingArtifactError,
    StaleArtifactError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DataError",
    "DimensionError",
    "LockError",
    "MissingArtifactError",
    "StaleArtifactError",
    "TrainingError",
    "__version__",
]
