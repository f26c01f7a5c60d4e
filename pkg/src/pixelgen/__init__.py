"""Pixel-space flow matching with perceptual supervision, at desk scale."""

from pixelgen.denoiser import Denoiser, DenoiserConfig
from pixelgen.flow import DiffusionBatch, TimeSamplerConfig
from pixelgen.metrics import MetricsReport, evaluate
from pixelgen.perception import Extractors, PerceptualConfig, total_loss
from pixelgen.samplers import SamplerConfig, sample
from pixelgen.tensor import Tape, Tensor, precision
from pixelgen.trainer import Trainer, TrainConfig

__all__ = [
    "Denoiser", "DenoiserConfig", "DiffusionBatch", "Extractors", "MetricsReport", "PerceptualConfig",
    "SamplerConfig", "Tape", "Tensor", "TimeSamplerConfig", "TrainConfig", "Trainer", "evaluate",
    "precision", "sample", "total_loss",
]
__version__ = "0.1.0"
