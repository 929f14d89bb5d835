"""Differentiable registration of an articulated body model to point clouds."""

__version__ = "0.1.0"
