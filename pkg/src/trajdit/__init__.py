"""Trajectory-conditioned latent video diffusion at desk scale."""

from .backbone import ModelConfig, STDiT
from .diffusion import ConditionMask, DiffusionSchedule
from .errors import (DimensionError, MissingDependencyError, NonFiniteError, TrajDiTError,
                     ValidationError)
from .extractor import MotionExtractor, extract_motion_patches
from .motion_vae import MotionVAE, vae_decode, vae_encode, vae_loss
from .trajectory import Trajectory, rasterize_trajectories

__version__ = "0.1.0"

__all__ = [
    "ConditionMask",
    "DiffusionSchedule",
    "DimensionError",
    "MissingDependencyError",
    "ModelConfig",
    "MotionExtractor",
    "MotionVAE",
    "NonFiniteError",
    "STDiT",
    "TrajDiTError",
    "Trajectory",
    "ValidationError",
    "extract_motion_patches",
    "rasterize_trajectories",
    "vae_decode",
    "vae_encode",
    "vae_loss",
]
