"""Prior-conditioned transformer for low-light image enhancement, built on a
from-scratch float32 tensor core with tape-based reverse-mode autodiff."""

from .model import IsaT, ModelConfig, build_from_checkpoint, describe, load_checkpoint, save_checkpoint
from .priors import (
    IlluminationPyramid,
    PriorBundle,
    SemanticPrior,
    build_pyramid,
    compute_priors,
    illumination_prior,
    load_semantic_prior,
    synthetic_semantic_prior,
)

__version__ = "0.1.0"

__all__ = [
    "IsaT",
    "ModelConfig",
    "IlluminationPyramid",
    "PriorBundle",
    "SemanticPrior",
    "build_from_checkpoint",
    "build_pyramid",
    "compute_priors",
    "describe",
    "illumination_prior",
    "load_checkpoint",
    "load_semantic_prior",
    "save_checkpoint",
    "synthetic_semantic_prior",
    "__version__",
]
