"""Latent-space analytics: embed, discretise, map correlations, profile clusters, predict."""

__version__ = "0.1.0"
