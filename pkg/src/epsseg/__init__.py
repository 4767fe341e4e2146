"""Sparsely supervised semantic segmentation with a hierarchical VAE.

Center-region inpainting, a per-class Gaussian-mixture top prior, a FiLM-conditioned
top posterior, a Gumbel-Softmax segmentation head and a contrastive latent loss.
"""
from .data import LabeledImage, MaskSpec, PatchSample, SparseLabelSet, SynthSpec
from .errors import ConfigError, DataError, NumericError
from .head import GmmPrior, TemperatureSchedule
from .losses import LossBreakdown, LossWeights
from .model import EpsSegModel, ModelConfig

__all__ = [
    "ConfigError",
    "DataError",
    "EpsSegModel",
    "GmmPrior",
    "LabeledImage",
    "LossBreakdown",
    "LossWeights",
    "MaskSpec",
    "ModelConfig",
    "NumericError",
    "PatchSample",
    "SparseLabelSet",
    "SynthSpec",
    "TemperatureSchedule",
]
__version__ = "0.1.0"
