"""Latent perceptual loss laboratory."""

__version__ = "0.1.0"
