"""Manifold-regularized masked-autoencoder pretraining at desk scale."""

__version__ = "0.1.0"
