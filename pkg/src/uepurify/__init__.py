"""Purification of unlearnable examples with a disentangling, rate-constrained VAE."""

__version__ = "0.1.0"
