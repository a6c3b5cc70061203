"""Masked-autoencoder pre-training with decoupled mask size, for long patch sequences."""

from .checkpoint import Checkpoint, CheckpointError
from .masking import MaskAssignment, sample_mask
from .model import ViTMAEConfig, init_params, mae_forward_loss, preset
from .specs import (
    CostEstimate,
    GeometryError,
    ImageSpec,
    MaskPlan,
    derive_input_spec,
    derive_mask_plan,
    enumerate_fix_one_vary_two,
    estimate_flops,
)
from .training import TrainConfig, pretrain
from .transfer import resample_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "CostEstimate",
    "GeometryError",
    "ImageSpec",
    "MaskAssignment",
    "MaskPlan",
    "TrainConfig",
    "ViTMAEConfig",
    "derive_input_spec",
    "derive_mask_plan",
    "enumerate_fix_one_vary_two",
    "estimate_flops",
    "init_params",
    "mae_forward_loss",
    "preset",
    "pretrain",
    "resample_checkpoint",
    "sample_mask",
]
