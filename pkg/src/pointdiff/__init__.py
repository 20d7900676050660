"""Diffusion-based scene completion for sparse LiDAR point clouds."""

from .geometry import RigidPose, VoxelGrid
from .metrics import MetricReport, evaluate
from .noise_model import ModelConfig, ToyNoisePredictor, TrainConfig
from .refinement import RefineConfig, RefineNet
from .sampler import SamplerConfig, sample
from .schedule import NoiseSchedule, make_linear_schedule

__version__ = "0.1.0"

__all__ = [
    "MetricReport",
    "ModelConfig",
    "NoiseSchedule",
    "RefineConfig",
    "RefineNet",
    "RigidPose",
    "SamplerConfig",
    "ToyNoisePredictor",
    "TrainConfig",
    "VoxelGrid",
    "evaluate",
    "make_linear_schedule",
    "sample",
]
