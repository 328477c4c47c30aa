"""Masked-face identification from upper-face crops.

Aligned faces lose their masked lower half, an external CNN turns the
crop into a feature map, a trainable RBF bag-of-features layer quantizes
the map into a fixed-length histogram, and a small MLP names the
identity.
"""

__version__ = "0.1.0"

from .bofquant import Codebook, init_codebook, quantize, quantize_backward, rbf_membership
from .errors import DeepBofError
from .mlp import MlpModel, TrainConfig, predict, train
from .tensorio import flatten, load_manifest, oversample, read_feature_map, write_feature_map

__all__ = [
    "Codebook",
    "DeepBofError",
    "MlpModel",
    "TrainConfig",
    "flatten",
    "init_codebook",
    "load_manifest",
    "oversample",
    "predict",
    "quantize",
    "quantize_backward",
    "rbf_membership",
    "read_feature_map",
    "train",
    "write_feature_map",
]
