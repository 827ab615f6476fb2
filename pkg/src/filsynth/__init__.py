"""Synthesis of filamentary-structured images from binary segmentation maps."""

__version__ = "0.1.0"
