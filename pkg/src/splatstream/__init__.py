"""Desk-scale collaborative rendering for large 3D Gaussian Splatting scenes."""

__version__ = "0.1.0"
