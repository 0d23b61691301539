"""Explainability toolkit for a toy multi-camera transformer detector."""

__version__ = "0.1.0"
