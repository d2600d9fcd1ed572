"""Numerical construction and verification of minimal immersions with catenoidal
necks or floating disks accumulating at a multiplicity-two flat point."""

__version__ = "0.1.0"
