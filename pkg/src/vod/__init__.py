"""Deepfake detection from volumes of frame differences over cropped face segments."""

__version__ = "0.1.0"
