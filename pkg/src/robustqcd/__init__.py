"""Robust quickest change detection for non-stationary post-change processes."""

__version__ = "0.1.0"
