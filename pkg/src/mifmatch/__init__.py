"""Modality-invariant keypoint description by latent/base feature aggregation."""
__version__ = "0.1.0"
