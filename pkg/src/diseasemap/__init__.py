"""Areal disease mapping with BYM2 Poisson models."""

__version__ = "0.1.0"
