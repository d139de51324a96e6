"""Semantic-aware image restoration by gradient search in a generator's latent space."""

__version__ = "0.1.0"
