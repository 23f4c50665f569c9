"""Multi-domain text-image recognition with per-domain adapters on a frozen
shared backbone."""

from .tensor import Tensor, GradTape, backward

__version__ = "0.1.0"

__all__ = ["Tensor", "GradTape", "backward", "__version__"]
