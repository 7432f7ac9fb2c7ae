"""Model-level fault tolerance for CNNs: vulnerability analysis, selective
channel duplication with EDAC layers, vulnerability-based pruning, and
bitflip fault-injection campaigns."""

from .engine import (
    LayerSpec,
    ModelGraph,
    backward,
    build_model,
    count_params_macs,
    forward,
    sgd_step,
)

__version__ = "0.1.0"

__all__ = [
    "LayerSpec",
    "ModelGraph",
    "backward",
    "build_model",
    "count_params_macs",
    "forward",
    "sgd_step",
]
