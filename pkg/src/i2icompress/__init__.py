"""Depth-skip pruning and gamma-curve time-step search on a toy conditional diffusion stack."""

__version__ = "0.1.0"
