"""Stable linear learning with causality-based feature rectification."""

__version__ = "0.1.0"
