"""Voxel radiance fields with per-vertex Bezier motion for dynamic scenes."""

__version__ = "0.1.0"
