"""Desk-scale report-to-image latent diffusion pipeline."""

__version__ = "0.1.0"
