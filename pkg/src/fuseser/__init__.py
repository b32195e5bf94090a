"""Multimodal speech-emotion heads over pre-extracted speech and text features."""

__version__ = "0.1.0"
