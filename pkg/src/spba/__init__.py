"""Patch-wise spectral backdoor attacks on point clouds."""

__version__ = "0.1.0"
