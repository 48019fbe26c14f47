"""Numerical laboratory for Lagrangian mean curvature flow in flat C^n."""

__version__ = "0.1.0"
