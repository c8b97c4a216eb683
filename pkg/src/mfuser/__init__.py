"""Toy-scale frozen-encoder fusion for domain-generalized semantic segmentation.

Pure numpy: a small reverse-mode autodiff core, a selective state-space scan,
the dual-stream fusion adapter, the text-query enhancer, frozen toy encoders,
a mask-classification decoder and a training / evaluation harness.
"""

from .config import ExperimentConfig
from .tensor import ConfigError, ContractError, DimensionError, NonFiniteError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "Tensor", "no_grad", "ConfigError", "ContractError",
           "DimensionError", "NonFiniteError", "__version__"]
