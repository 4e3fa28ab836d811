"""Numerical laboratory for mean-field games with common noise."""

__version__ = "0.1.0"
