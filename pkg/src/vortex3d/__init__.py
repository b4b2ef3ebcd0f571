"""Volumetric spatial transcriptomics prediction from 3D tissue morphology."""

__version__ = "0.1.0"

from . import analysis, evaluation, model, preprocess, registration, store, training

__all__ = [
    "analysis",
    "evaluation",
    "model",
    "preprocess",
    "registration",
    "store",
    "training",
    "__version__",
]
