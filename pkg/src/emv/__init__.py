"""Exploratory (entropy-regularised) continuous-time mean-variance portfolio selection."""

__version__ = "0.1.0"
