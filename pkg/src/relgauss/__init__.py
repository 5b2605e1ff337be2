"""Relational graph transformer with a learnable Gaussian temporal
attention bias, plus the numerical verification suite for its guarantees."""

__version__ = "0.1.0"
