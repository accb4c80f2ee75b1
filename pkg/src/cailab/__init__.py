"""Causal action influence lab for the 1DSlide environment."""

__version__ = "0.1.0"
