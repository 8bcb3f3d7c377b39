"""Latent-conditioned motion control on a planar character."""

__version__ = "0.1.0"
