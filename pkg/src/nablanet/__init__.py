"""Nabla-N segmentation and IRRCNN classification on a small numpy autograd core."""

from nablanet.models import ModelSpec, build_irrcnn, build_model, build_nabla_net, count_params
from nablanet.tensor import Tape, Tensor, backward

__all__ = [
    "ModelSpec",
    "Tape",
    "Tensor",
    "backward",
    "build_irrcnn",
    "build_model",
    "build_nabla_net",
    "count_params",
]
__version__ = "0.1.0"
