"""Multi-scale and cross-scale supervised contrastive losses for dense prediction.

A self-contained numpy implementation: a small reverse-mode autodiff engine,
label pyramids, balanced anchor sampling, the contrastive loss family, and a
toy segmentation pipeline to train and evaluate with.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, Tape, backward, check_gradients, no_grad
from .labels import IGNORE_INDEX, build_pyramid, downsample_labels
from .losses import LossConfig, cross_scale_loss, info_nce, multi_scale_loss, total_loss
from .sampling import build_pool, dense_anchor_set, sample_anchor_set, substream

__all__ = [
    "Tensor", "Tape", "backward", "check_gradients", "no_grad",
    "IGNORE_INDEX", "build_pyramid", "downsample_labels",
    "LossConfig", "info_nce", "multi_scale_loss", "cross_scale_loss", "total_loss",
    "build_pool", "sample_anchor_set", "dense_anchor_set", "substream",
    "__version__",
]
