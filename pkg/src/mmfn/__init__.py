"""Multi-grained multimodal fusion network for fake-news classification."""

from .classifier import bce_loss, classify
from .coattention import CTBlock, CTConfig, ct_forward, fine_grained_pair
from .fusion import FusionHeads, cosine_similarity, fuse
from .model import MMFN, VARIANT_NAMES, Batch, Dims, make_variant
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "MMFN",
    "VARIANT_NAMES",
    "Batch",
    "CTBlock",
    "CTConfig",
    "Dims",
    "FusionHeads",
    "TrainConfig",
    "bce_loss",
    "classify",
    "cosine_similarity",
    "ct_forward",
    "evaluate",
    "fine_grained_pair",
    "fuse",
    "make_variant",
    "train",
]
