"""Numerics and simulation for the continuous-time random walk pinning model."""

__version__ = "0.1.0"
