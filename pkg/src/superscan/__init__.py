"""Superpixel-token state-space mixture-of-experts super-resolution in numpy."""
from .kernels import BACKEND
from .model import ModelConfig, build, forward, param_count, preset, self_ensemble
from .rng import Rng
from .tensor import get_dtype, precision, set_dtype

__version__ = "0.1.0"

__all__ = ["BACKEND", "ModelConfig", "Rng", "build", "forward", "get_dtype", "param_count",
           "precision", "preset", "self_ensemble", "set_dtype", "__version__"]
