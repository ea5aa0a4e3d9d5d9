"""Recursive weight-shared student encoders distilled from a transformer teacher."""

__version__ = "0.1.0"
