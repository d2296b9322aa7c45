"""Desk-scale diffusion toolkit for paired stain translation."""

__version__ = "0.1.0"
