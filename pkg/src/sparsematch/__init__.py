"""Sparse keypoint correspondence at desk scale.

Library layout:

* `autodiff` - numpy-backed tensors with reverse-mode differentiation and
  tape-element accounting.
* `model` - compact encoder and the lightweight upsampling decoder.
* `matching` - sparse cosine matching and window-based localization.
* `metrics` - coordinate losses, PCK, keypoint-fusion statistics.
* `data` - SMTF tensor files, annotation records, synthetic pairs.
* `membench` - training-memory accounting for the matching regimes.
* `train` - seeded training loop.
* `cli` - the `sparsematch` command.
"""

from .autodiff import TAPE, Tensor, backward, grad_check, no_grad
from .data import PairAnnotation, SyntheticSpec, generate_pair, read_tensor, write_tensor
from .matching import (
    KeypointSet,
    MatchPrediction,
    SimilarityMatrix,
    WindowScores,
    match_features,
    match_pyramid,
)
from .metrics import FusionReport, PckReport, fusion_stats, l2_coord_loss, multiscale_loss, pck
from .membench import MemoryReport, measure, reduction_ratio
from .model import CorrespondenceModel, DecoderConfig, EncoderConfig, FeaturePyramid

__version__ = "0.1.0"

__all__ = [
    "TAPE",
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
    "PairAnnotation",
    "SyntheticSpec",
    "generate_pair",
    "read_tensor",
    "write_tensor",
    "KeypointSet",
    "MatchPrediction",
    "SimilarityMatrix",
    "WindowScores",
    "match_features",
    "match_pyramid",
    "FusionReport",
    "PckReport",
    "fusion_stats",
    "l2_coord_loss",
    "multiscale_loss",
    "pck",
    "MemoryReport",
    "measure",
    "reduction_ratio",
    "CorrespondenceModel",
    "DecoderConfig",
    "EncoderConfig",
    "FeaturePyramid",
    "__version__",
]
