"""Bilateral slot attention on paired images, built on a small numpy autodiff engine."""
from .bilateral import VARIANTS, BilateralModel, ModelConfig, forward_pair
from .encoder import ConfigError
from .synthdata import Dataset, DatasetSpec, generate_dataset
from .tensor import Rng, Tensor, grad_check

__all__ = ["VARIANTS", "BilateralModel", "ModelConfig", "forward_pair", "ConfigError",
           "Dataset", "DatasetSpec", "generate_dataset", "Rng", "Tensor", "grad_check"]
__version__ = "0.1.0"
