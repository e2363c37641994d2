"""Desk-scale study-level contrastive image-text pretraining."""

__version__ = "0.1.0"

from .losses import (
    EmbeddingBatch,
    LossOutput,
    LossWeights,
    Temperature,
    clip_loss,
    icl_loss,
    l2_normalize,
    mvs_loss,
    tcl_loss,
    total_loss,
)

__all__ = [
    "EmbeddingBatch",
    "LossOutput",
    "LossWeights",
    "Temperature",
    "clip_loss",
    "icl_loss",
    "l2_normalize",
    "mvs_loss",
    "tcl_loss",
    "total_loss",
    "__version__",
]
