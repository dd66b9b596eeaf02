"""Partial-label learning under rival-label corruption, at desk scale."""

__version__ = "0.1.0"
