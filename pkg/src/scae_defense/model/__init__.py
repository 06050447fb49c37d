from .pcae import PartCapsuleSet
from .scae import (
    LossBreakdown,
    ScaeModel,
    ScaeOutputs,
    ShapeError,
    compute_loss,
    encode,
    encode_presences,
    init_model,
    reconstruct,
)

__all__ = [
    "LossBreakdown",
    "PartCapsuleSet",
    "ScaeModel",
    "ScaeOutputs",
    "ShapeError",
    "compute_loss",
    "encode",
    "encode_presences",
    "init_model",
    "reconstruct",
]
