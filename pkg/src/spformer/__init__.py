"""Superpixel transformer in numpy: autodiff, sparse cross-attention, SLIC
baseline, evaluation and a small training loop."""
from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import GridError, HardAssignment, build_grid, hard_assign
from .model import ConfigError, ModelConfig, SPFormer, flops_estimate, param_count, variant_config
from .sca import AssociationMap, ScaParams, sca_forward
from .tensor import NumericError, ShapeError, Tensor, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "AssociationMap", "ConfigError", "GridError", "HardAssignment", "ModelConfig", "NumericError",
    "SPFormer", "ScaParams", "ShapeError", "Tensor", "build_grid", "flops_estimate", "hard_assign",
    "load_checkpoint", "no_grad", "param_count", "precision", "save_checkpoint", "sca_forward",
    "variant_config",
]
