"""Desk-scale 3D vision-language pre-training on synthetic CT-like phantoms."""

__version__ = "0.1.0"
