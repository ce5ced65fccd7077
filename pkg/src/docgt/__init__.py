"""Automatic ground-truth generation for camera-captured document images."""

__version__ = "0.1.0"
