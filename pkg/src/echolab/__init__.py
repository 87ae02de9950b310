"""Desk-scale diffusion sampling, discriminator guidance and FID evaluation."""

__version__ = "0.1.0"
