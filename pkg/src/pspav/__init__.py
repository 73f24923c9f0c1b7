"""Audio-visual event localisation with positive sample propagation, on numpy."""

from .model import Dims, forward, init_params
from .train import RunConfig

__all__ = ["Dims", "RunConfig", "forward", "init_params"]
__version__ = "0.1.0"
