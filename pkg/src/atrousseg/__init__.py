"""Atrous-convolution semantic segmentation in plain numpy.

Dilated convolutions, a stride-convertible residual backbone, an ASPP head,
a two-stage training loop and multi-scale evaluation, at desk scale.
"""
from .aspp import AsppConfig
from .backbone import convert_to_output_stride, make_network_spec
from .config import RunConfig, load_config, parse_config
from .evaluate import InferenceConfig, evaluate_arrays, mean_iou
from .model import DeepLabV3
from .train import TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "AsppConfig", "DeepLabV3", "InferenceConfig", "RunConfig", "TrainConfig", "convert_to_output_stride",
    "evaluate_arrays", "load_config", "make_network_spec", "mean_iou", "parse_config", "run_training",
]
