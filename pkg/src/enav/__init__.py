"""Entropy-gated hybrid reasoning for object-goal navigation in small gridworlds."""

__version__ = "0.1.0"
