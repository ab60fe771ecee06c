"""Translate-and-refine multimodal machine translation at desk scale."""

from .backend import active_backend
from .model import BLANK, BOS, EOS, PAD, UNK, ModelConfig, TransformerMT
from .tensor import Tensor, no_grad, set_default_dtype, using_dtype

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "TransformerMT",
    "Tensor",
    "active_backend",
    "no_grad",
    "set_default_dtype",
    "using_dtype",
    "PAD",
    "BOS",
    "EOS",
    "UNK",
    "BLANK",
    "__version__",
]
