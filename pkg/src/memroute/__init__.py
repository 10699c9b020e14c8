"""Adaptive token routing for memory-efficient matting transformers."""

__version__ = "0.1.0"
