"""Sketch-specific data augmentation: Bezier pivot deformation and mean-stroke reconstruction."""

__version__ = "0.1.0"
