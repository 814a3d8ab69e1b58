"""Test-time optimization of latent codes and hypernetwork priors for implicit shapes."""

__version__ = "0.1.0"
