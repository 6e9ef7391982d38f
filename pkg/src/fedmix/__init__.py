"""Federated mixture of experts with per-client gates and a shared posterior table."""
from .kernels import BACKEND
from .numerics import MlpSpec, ParamVector
from .posterior import ConfigError, PosteriorTable

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigError", "MlpSpec", "ParamVector", "PosteriorTable", "__version__"]
