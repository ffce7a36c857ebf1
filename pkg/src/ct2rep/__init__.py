"""Radiology report generation for 3D CT volumes, with a longitudinal variant."""

__version__ = "0.1.0"
