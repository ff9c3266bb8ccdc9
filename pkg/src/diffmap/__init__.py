"""Desk-scale latent diffusion refinement of rasterized HD-map segmentation."""

__version__ = "0.1.0"
