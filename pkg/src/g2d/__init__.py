"""Masked-face verification pipeline: generative encoder, distilled reformer, classifier."""

__version__ = "0.1.0"
