"""Leapfrog latent consistency distillation on toy worlds."""

__version__ = "0.1.0"
