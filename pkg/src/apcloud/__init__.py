"""Adaptive particle-cloud and particle-in-cell electrostatic field solvers."""

__version__ = "0.1.0"
