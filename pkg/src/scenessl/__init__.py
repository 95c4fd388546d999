"""Desk-scale self-supervised indoor-scene experiment engine."""

__version__ = "0.1.0"
