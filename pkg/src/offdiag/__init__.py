"""Numerical diagnostics for essential selfadjointness of banded operators."""
__version__ = "0.1.0"
