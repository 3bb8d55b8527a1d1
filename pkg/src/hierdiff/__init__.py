"""Depth-layered, multi-scale visual diffusion policies on numpy."""

__version__ = "0.1.0"
