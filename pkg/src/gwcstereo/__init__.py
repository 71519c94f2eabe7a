"""Group-wise correlation stereo matching on a small numpy autograd engine."""

from .config import ConfigError, NetworkConfig, SweepConfig, TrainConfig, load_config
from .cost_volume import (build_combined_volume, build_concat_volume, build_full_correlation_volume,
                          build_gwc_volume)
from .losses import MetricReport, evaluate, total_loss
from .model import StereoNet, predict_disparity
from .tensor import Parameter, Tensor, no_grad

__all__ = [
    "ConfigError", "NetworkConfig", "SweepConfig", "TrainConfig", "load_config",
    "build_combined_volume", "build_concat_volume", "build_full_correlation_volume", "build_gwc_volume",
    "MetricReport", "evaluate", "total_loss",
    "StereoNet", "predict_disparity",
    "Parameter", "Tensor", "no_grad",
]
__version__ = "0.1.0"
