"""Slice-to-volume registration with an iterative transformer and a
differentiable conjugate-gradient volume solver."""

__version__ = "0.1.0"
