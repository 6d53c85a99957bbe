"""Desk-scale latent-diffusion 3D shape generation over truncated signed distance fields."""

__version__ = "0.1.0"
