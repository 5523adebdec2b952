"""Multimodal controllers for generative models, on a small numpy autodiff engine."""
from .codebook import Codebook, sample_codebook
from .errors import McgenError
from .mc import McLayer, MultimodalController
from .rng import Stream
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Codebook", "McLayer", "McgenError", "MultimodalController", "Stream", "Tensor", "sample_codebook", "__version__"]
