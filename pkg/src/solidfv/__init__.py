"""Finite-volume solidification simulation with sparse-grid UQ."""

__version__ = "0.1.0"
