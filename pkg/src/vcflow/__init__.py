"""Pitch-conditioned flow-matching voice conversion on a synthetic corpus."""

__version__ = "0.1.0"
