"""Latent dynamic diffusion for image-to-video synthesis."""

__version__ = "0.1.0"
