"""Photorealistic video color stylization toolkit."""

__version__ = "0.1.0"
