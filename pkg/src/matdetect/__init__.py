"""Detect room surface material categories from acoustic impulse responses."""

__version__ = "0.1.0"
