"""Fit a symmetric, articulated, textured mesh to a video of one object by differentiable rendering."""

__version__ = "0.1.0"
