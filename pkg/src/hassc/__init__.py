"""Hardness-aware training machinery for semantic scene completion on voxel grids."""

__version__ = "0.1.0"
