"""Segmentation-driven actor-critic on desk-scale 2D control tasks."""

__version__ = "0.1.0"
