"""Contrastive context representations for conversational speech.

A desk-scale workbench: synthetic dialogue corpora with analyzable audio,
signal and text featurization, triplet sampling with hard (shared-speaker)
negatives, small hand-differentiated context encoders trained with
contrastive objectives, an attention-based prosody predictor, and the
objective evaluation suite (DTW-aligned cepstral distortion, log-F0 RMSE,
margin satisfaction, real-versus-fake context sensitivity, PCA export).
"""

from . import corpus, encoder, features, metrics, prosody, sampler, training
from .errors import ConvctxError

__version__ = "0.1.0"

__all__ = [
    "ConvctxError",
    "corpus",
    "encoder",
    "features",
    "metrics",
    "prosody",
    "sampler",
    "training",
    "__version__",
]
