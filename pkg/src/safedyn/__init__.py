"""Certified lifted-model identification and sampling-based control."""

__version__ = "0.1.0"
