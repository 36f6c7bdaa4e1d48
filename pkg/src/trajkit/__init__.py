"""Coarse-to-fine trajectory planning toolkit on synthetic driving scenes."""

__version__ = "0.1.0"
