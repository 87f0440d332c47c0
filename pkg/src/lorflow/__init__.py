"""Harmonic maps into warped targets N x R: a projected heat flow coupled to an elliptic constraint."""

__version__ = "0.1.0"
