"""Desk-scale dual-conditioned diffusion for detection-data generation."""

__version__ = "0.1.0"
