"""Bias transfer between microscopy image domains."""

__version__ = "0.1.0"
