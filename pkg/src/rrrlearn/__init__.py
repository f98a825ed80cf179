"""Constraint-based neural network training with the RRR projection algorithm."""

__version__ = "0.1.0"
