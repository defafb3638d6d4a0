"""Resampling folds with conditional distribution shift."""

__version__ = "0.1.0"
