"""Region-conditioned visual question answering on synthetic scenes.

Everything is built on a small reverse-mode autodiff engine (`lvqa.tensor`);
the model answers binary questions about image regions by computing glimpse
attention over the whole image and masking it to the region only afterwards.
"""

from .config import DataConfig, ModelConfig, RunConfig, TrainConfig
from .tensor import Tensor, grad_check, no_grad

__all__ = [
    "DataConfig",
    "ModelConfig",
    "RunConfig",
    "Tensor",
    "TrainConfig",
    "grad_check",
    "no_grad",
]

__version__ = "0.1.0"
