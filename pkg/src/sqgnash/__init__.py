"""Pseudo-spectral toolkit for Newton-Nash convex integration of the 2D SQG equations."""

__version__ = "0.1.0"
