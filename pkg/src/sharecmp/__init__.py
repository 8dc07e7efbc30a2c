"""Shared dual-branch RGB-polarization segmentation."""

__version__ = "0.1.0"
