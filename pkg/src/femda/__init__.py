"""Finite-element continuous data assimilation with a diagonal nudging operator."""

__version__ = "0.1.0"
