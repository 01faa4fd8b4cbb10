"""XNet: dual encoder-decoder segmentation of X-ray images.

A self-contained toolkit that classifies every pixel of a radiograph as
open beam, soft tissue or bone.  It ships its own reverse-mode autodiff
tensor core, the two-module encoder-decoder network, Adam training with
early stopping, label-consistent geometric augmentation, a synthetic
phantom generator for desk-scale experiments, and a metrics suite with
ROC/AUC, confidence calibration and threshold-based false-positive
reduction.
"""

__version__ = "0.1.0"

from . import augment, data, errors, interp, metrics, model, train
from .tensor import (
    PoolIndexMap,
    ProbabilityMap,
    Tensor4,
    concat_channels,
    conv2d,
    cross_entropy_loss,
    l2_penalty,
    maxpool2x2,
    relu,
    softmax_pixelwise,
    upsample_nearest2x,
)

__all__ = [
    "augment",
    "data",
    "errors",
    "interp",
    "metrics",
    "model",
    "train",
    "PoolIndexMap",
    "ProbabilityMap",
    "Tensor4",
    "concat_channels",
    "conv2d",
    "cross_entropy_loss",
    "l2_penalty",
    "maxpool2x2",
    "relu",
    "softmax_pixelwise",
    "upsample_nearest2x",
]
