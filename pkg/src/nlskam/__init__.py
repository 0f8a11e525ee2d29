"""Quasi-periodic solutions of the forced reversible NLS."""

__version__ = "0.1.0"
