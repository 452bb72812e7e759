"""Pre-LN / Pre-RMSNorm / Pre-CRMSNorm transformer variants and the exact
weight surgery that converts checkpoints between them."""

from normunify.config import ModelConfig, NormConfig, NormKind, Variant
from normunify.model import BlockParams, ForwardTrace, ModelParams, forward, init_params

__all__ = [
    "BlockParams",
    "ForwardTrace",
    "ModelConfig",
    "ModelParams",
    "NormConfig",
    "NormKind",
    "Variant",
    "forward",
    "init_params",
]

__version__ = "0.1.0"
