"""confex-bridge: torch glue for the confex engine.

A stdio prediction server speaking the engine's wire protocol, and an
attribution exporter that turns image directories into engine-ready
interchange files (normalized image tensors, channel-summed attribution
maps, manifest).
"""

__version__ = "0.1.0"

from .cfxt import read_tensor, write_tensor
from .explainers import (
    EXPLAINERS,
    gradient_shap,
    input_x_gradient,
    kernel_shap,
    run_explainer,
    saliency,
)
from .export import export
from .models import BridgeConfig, LinearSoftmaxModel, load_model
from .server import serve

__all__ = [name for name in dir() if not name.startswith("_")]
